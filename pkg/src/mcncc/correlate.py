"""Normalized correlation scores and dense alignment search.

Scoring a pair of maps reduces to the sample Pearson coefficient per
channel: standardize each channel over the support region, average the
products.  The multi-channel score is the mean (or a weighted sum) of
the per-channel coefficients; the full-trace multivariate coefficient
is kept as the reference the diagonal form approximates.

The alignment search scans a translation grid, optionally crossed with
a rotation grid, scoring each pose over the valid overlap and returning
the argmax with a deterministic (dy, dx, angle) tie-break.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    DatabaseItemError,
    DimensionMismatchError,
    EmptySearchError,
    McnccError,
    NumericalError,
)
from .normalize import GlobalStats, NormalizationScheme, SCHEME_PRESETS, StatScope
from .tensor import (
    DEFAULT_EPSILON,
    FeatureMap,
    SupportRegion,
    _as_locked_array,
    effective_mask,
    rotate,
)

MCNCC_SCHEME = SCHEME_PRESETS["standardize-channel"]


@dataclass(frozen=True)
class ChannelWeights:
    """Per-channel importance weights plus the decision bias.

    The bias is carried here but applied only by the loss/decision
    layer; correlation scores themselves never include it (rankings are
    invariant to a shared bias).
    """

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = _as_locked_array(self.weights, dtype=np.float64, ndim=1, name="weights")
        if not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("channel weights and bias must be finite")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, channels: int) -> "ChannelWeights":
        return cls(np.full(channels, 1.0 / channels), bias=0.0)

    def __len__(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class AlignmentConfig:
    """Translation/rotation grid for the exhaustive pose search."""

    translation_stride: int = 1
    rotation_min: float = 0.0
    rotation_max: float = 0.0
    rotation_stride: float = 4.0
    min_overlap_fraction: float = 0.5

    def __post_init__(self):
        if self.translation_stride < 1:
            raise ValueError("translation stride must be >= 1 pixel")
        if self.rotation_stride <= 0:
            raise ValueError("rotation stride must be > 0 degrees")
        if self.rotation_min > self.rotation_max:
            raise ValueError("rotation_min must be <= rotation_max")
        if not 0.0 < self.min_overlap_fraction <= 1.0:
            raise ValueError("min_overlap_fraction must lie in (0, 1]")

    def angles(self) -> np.ndarray:
        span = self.rotation_max - self.rotation_min
        count = int(math.floor(span / self.rotation_stride + 1e-9)) + 1
        return self.rotation_min + self.rotation_stride * np.arange(count)


@dataclass(frozen=True)
class MatchScore:
    """Best correlation found, with the pose that achieved it."""

    score: float
    dy: int
    dx: int
    angle: float
    overlap: int


def per_channel_ncc(
    x: FeatureMap,
    y: FeatureMap,
    region: SupportRegion,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Vector of per-channel normalized cross-correlations over P."""
    if x.channels != y.channels:
        raise DimensionMismatchError(f"channel mismatch: {x.channels} != {y.channels}")
    if x.spatial_shape != y.spatial_shape:
        raise DimensionMismatchError(
            f"spatial mismatch: {x.spatial_shape} != {y.spatial_shape}"
        )
    mask = effective_mask(x, region) & effective_mask(y, region)
    if int(mask.sum()) < 2:
        raise McnccError("fewer than 2 jointly valid pixels in support region")
    xs = x.values[:, mask].astype(np.float64, copy=False)
    ys = y.values[:, mask].astype(np.float64, copy=False)
    return _ncc_rows(xs, ys, epsilon)


def _ncc_rows(xs: np.ndarray, ys: np.ndarray, epsilon: float) -> np.ndarray:
    """NCC of each row pair of two (C, n) sample matrices."""
    xc = xs - xs.mean(axis=1, keepdims=True)
    yc = ys - ys.mean(axis=1, keepdims=True)
    denx = np.sqrt(np.maximum((xc**2).mean(axis=1), 0.0)) + epsilon
    deny = np.sqrt(np.maximum((yc**2).mean(axis=1), 0.0)) + epsilon
    cross = (xc * yc).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where((denx > 0) & (deny > 0), cross / (denx * deny), 0.0)
    return out


def ncc_single(
    x: np.ndarray,
    y: np.ndarray,
    region: SupportRegion,
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Sample Pearson coefficient of two equal-size single-channel views.

    Equals the normalized cross-correlation of the two patches over the
    region; a zero-variance side yields 0 under the epsilon convention.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"shape mismatch: {x.shape} != {y.shape}")
    if region.shape != x.shape:
        raise DimensionMismatchError(
            f"region of shape {region.shape} does not fit views of shape {x.shape}"
        )
    mask = np.asarray(region.mask)
    return float(_ncc_rows(x[mask][None, :], y[mask][None, :], epsilon)[0])


def mcncc(
    x: FeatureMap,
    y: FeatureMap,
    region: SupportRegion,
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Mean of per-channel NCC values; lies in [-1, 1]."""
    return float(per_channel_ncc(x, y, region, epsilon).mean())


def mcncc_weighted(
    x: FeatureMap,
    y: FeatureMap,
    region: SupportRegion,
    weights: ChannelWeights,
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Weighted sum of per-channel NCC values (bias not applied here)."""
    if len(weights) != x.channels:
        raise DimensionMismatchError(
            f"{len(weights)} weights for {x.channels} channels"
        )
    return float(weights.weights @ per_channel_ncc(x, y, region, epsilon))


def multivariate_trace(
    x: FeatureMap,
    y: FeatureMap,
    region: SupportRegion,
    ridge: float | None = None,
) -> float:
    """Full-trace multivariate correlation coefficient.

    (1/C) * Tr(Sxx^{-1/2} Sxy Syy^{-1/2}) with sample covariances over
    the region and ridge*I added to both auto-covariances before the
    inverse square root.  This is the reference the per-channel mean
    approximates when channels are uncorrelated; it is quadratic in C
    and meant for oracle-scale use.
    """
    if x.channels != y.channels:
        raise DimensionMismatchError(f"channel mismatch: {x.channels} != {y.channels}")
    mask = effective_mask(x, region) & effective_mask(y, region)
    xs = x.values[:, mask].astype(np.float64, copy=False)
    ys = y.values[:, mask].astype(np.float64, copy=False)
    C = xs.shape[0]
    n = xs.shape[1]
    xc = xs - xs.mean(axis=1, keepdims=True)
    yc = ys - ys.mean(axis=1, keepdims=True)
    sxx = xc @ xc.T / n
    syy = yc @ yc.T / n
    sxy = xc @ yc.T / n

    def isqrt(mat, label):
        r = ridge
        if r is None:
            r = 1e-6 * np.trace(mat) / C
        evals, evecs = np.linalg.eigh(mat + r * np.eye(C))
        if evals.min() <= 0:
            raise NumericalError(
                f"covariance {label} not positive definite "
                f"(min eigenvalue {evals.min():.3e}, ridge {r:.3e})"
            )
        return (evecs / np.sqrt(evals)) @ evecs.T

    t = isqrt(sxx, "of first map") @ sxy @ isqrt(syy, "of second map")
    return float(np.trace(t) / C)


@dataclass(frozen=True)
class CorrelationScorer:
    """Scoring policy for the alignment search.

    Scores a pose as the weighted per-channel sum of normalized window
    products under `scheme`; with the standardize-channel scheme and
    uniform weights this is exactly the multi-channel NCC.  Global
    schemes need dataset statistics for each side's domain.
    """

    scheme: NormalizationScheme = MCNCC_SCHEME
    weights: ChannelWeights | None = None
    global_query: GlobalStats | None = None
    global_target: GlobalStats | None = None
    epsilon: float = DEFAULT_EPSILON

    def weight_vector(self, channels: int) -> np.ndarray:
        if self.weights is None:
            return np.full(channels, 1.0 / channels)
        if len(self.weights) != channels:
            raise DimensionMismatchError(
                f"{len(self.weights)} weights for {channels} channels"
            )
        return np.asarray(self.weights.weights)


def _pre_transform(fmap, stats, scheme, epsilon):
    """Fold global centering/scaling into the map; return map and the
    scheme remainder the per-pose kernel still has to apply."""
    cen, sca = scheme.centering, scheme.scaling
    if StatScope.GLOBAL_CHANNEL not in (cen, sca):
        return fmap, scheme
    if stats is None:
        raise McnccError("scorer scheme references global statistics but none were given")
    if stats.channels != fmap.channels:
        raise DimensionMismatchError(
            f"global stats for {stats.channels} channels, map has {fmap.channels}"
        )
    values = fmap.values
    if cen is StatScope.GLOBAL_CHANNEL:
        values = values - stats.means[:, None, None]
        cen = StatScope.NONE
    if sca is StatScope.GLOBAL_CHANNEL:
        values = values / (stats.stddevs + epsilon)[:, None, None]
        sca = StatScope.NONE
    return fmap.with_values(values), NormalizationScheme(cen, sca)


def _pose_scores_from_sums(n, sx, sy, sxx, syy, sxy, scheme, w, epsilon):
    """Score every pose from its masked window sums (vectorized).

    Implements score = sum_c w_c * E[(x-a)(y-b)] / (devx * devy) where
    the offsets a, b and deviations come from the scheme; poses with
    n < 2 come back NaN.
    """
    C = sx.shape[0]
    ok = n >= 2
    nn = np.where(ok, n, np.nan)

    mx = sx / nn
    my = sy / nn
    cen, sca = scheme.centering, scheme.scaling

    if cen is StatScope.LOCAL_VOLUME:
        ax = np.broadcast_to(sx.sum(axis=0) / (C * nn), mx.shape)
        ay = np.broadcast_to(sy.sum(axis=0) / (C * nn), my.shape)
    elif cen is StatScope.LOCAL_CHANNEL:
        ax, ay = mx, my
    else:
        ax = np.zeros_like(mx)
        ay = np.zeros_like(my)

    if sca is StatScope.LOCAL_VOLUME:
        vx = sxx.sum(axis=0) / (C * nn) - (sx.sum(axis=0) / (C * nn)) ** 2
        vy = syy.sum(axis=0) / (C * nn) - (sy.sum(axis=0) / (C * nn)) ** 2
        devx = np.broadcast_to(np.sqrt(np.maximum(vx, 0.0)) + epsilon, mx.shape)
        devy = np.broadcast_to(np.sqrt(np.maximum(vy, 0.0)) + epsilon, my.shape)
    elif sca is StatScope.LOCAL_CHANNEL:
        devx = np.sqrt(np.maximum(sxx / nn - mx**2, 0.0)) + epsilon
        devy = np.sqrt(np.maximum(syy / nn - my**2, 0.0)) + epsilon
    else:
        devx = np.ones_like(mx)
        devy = np.ones_like(my)

    cross = sxy / nn - ax * (sy / nn) - ay * (sx / nn) + ax * ay
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where((devx > 0) & (devy > 0), cross / (devx * devy), 0.0)
    scores = np.einsum("c,cab->ab", w, contrib)
    return np.where(ok, scores, np.nan)


def _scan_angle(query, target, angle, cfg, scheme, w, epsilon, backend):
    rq = rotate(query, angle)
    n, sx, sy, sxx, syy, sxy = _kernels.scan_sums(
        rq.values,
        rq.valid_mask(),
        target.values,
        target.valid_mask(),
        stride=cfg.translation_stride,
        backend=backend,
    )
    scores = _pose_scores_from_sums(n, sx, sy, sxx, syy, sxy, scheme, w, epsilon)
    min_count = max(2.0, cfg.min_overlap_fraction * query.height * query.width)
    scores = np.where(n >= min_count, scores, np.nan)
    return scores, n


def search_alignments(
    query: FeatureMap,
    target: FeatureMap,
    cfg: AlignmentConfig,
    scorer: CorrelationScorer | None = None,
    backend: str | None = None,
) -> MatchScore:
    """Exhaustive translation x rotation scan; returns the argmax pose.

    The support region at each pose is the overlap of both validity
    masks inside the window; poses covering less than
    ``min_overlap_fraction`` of the query area are skipped.  Ties are
    broken toward the smallest (dy, dx, angle).
    """
    scorer = scorer or CorrelationScorer()
    if query.channels != target.channels:
        raise DimensionMismatchError(
            f"channel mismatch: query {query.channels}, target {target.channels}"
        )
    if query.height > target.height or query.width > target.width:
        raise DimensionMismatchError(
            f"query {query.spatial_shape} larger than target {target.spatial_shape}"
        )

    q_pre, scheme = _pre_transform(query, scorer.global_query, scorer.scheme, scorer.epsilon)
    t_pre, _ = _pre_transform(target, scorer.global_target, scorer.scheme, scorer.epsilon)
    w = scorer.weight_vector(query.channels)

    stride = cfg.translation_stride
    best = None  # (score, dy, dx, angle, overlap)
    for angle in cfg.angles():
        scores, counts = _scan_angle(
            q_pre, t_pre, float(angle), cfg, scheme, w, scorer.epsilon, backend
        )
        if not np.any(np.isfinite(scores)):
            continue
        flat = np.where(np.isfinite(scores), scores, -np.inf)
        idx = np.unravel_index(int(np.argmax(flat)), flat.shape)  # first max is lex-min
        cand = (
            float(flat[idx]),
            int(idx[0] * stride),
            int(idx[1] * stride),
            float(angle),
            int(counts[idx]),
        )
        if best is None or cand[0] > best[0] or (
            cand[0] == best[0] and cand[1:4] < best[1:4]
        ):
            best = cand
    if best is None:
        raise EmptySearchError(
            "no pose satisfies the minimum overlap requirement "
            f"(min_overlap_fraction={cfg.min_overlap_fraction})"
        )
    return MatchScore(score=best[0], dy=best[1], dx=best[2], angle=best[3], overlap=best[4])


def score_database(
    query: FeatureMap,
    db: list[FeatureMap],
    cfg: AlignmentConfig,
    scorer: CorrelationScorer | None = None,
    exclude: frozenset[int] | set[int] = frozenset(),
    workers: int = 1,
    backend: str | None = None,
) -> list[tuple[int, MatchScore]]:
    """Best alignment of the query against every database item.

    Returns (db_index, MatchScore) pairs in database order, skipping
    excluded indices (the self-match).  Results are identical for any
    worker count: items are independent and order is preserved.
    """
    indices = [i for i in range(len(db)) if i not in exclude]

    def one(i):
        try:
            return search_alignments(query, db[i], cfg, scorer, backend=backend)
        except McnccError as exc:
            raise DatabaseItemError(f"database item {i}: {exc}", index=i) from exc

    if workers <= 1 or len(indices) <= 1:
        results = [one(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, indices))
    return list(zip(indices, results))
