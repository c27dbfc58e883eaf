"""Independent reference implementations used to check the library.

Everything here recomputes results from definitions (plain loops,
per-pose recomputation, finite differences, exhaustive enumeration) and
deliberately avoids the optimized code paths it is used to verify.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from mcncc.normalize import StatScope
from mcncc.tensor import rotate


def pearson_oracle(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson coefficient, straight from the defining formula."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    mx = x.mean()
    my = y.mean()
    sxy = ((x - mx) * (y - my)).mean()
    sxx = ((x - mx) ** 2).mean()
    syy = ((y - my) ** 2).mean()
    return sxy / (math.sqrt(sxx) * math.sqrt(syy))


def covariances_oracle(xs: np.ndarray, ys: np.ndarray):
    """Brute-force sample covariance matrices of (C, n) sample sets."""
    C, n = xs.shape
    mx = xs.mean(axis=1)
    my = ys.mean(axis=1)
    sxx = np.zeros((C, C))
    syy = np.zeros((C, C))
    sxy = np.zeros((C, C))
    for a in range(C):
        for b in range(C):
            sxx[a, b] = ((xs[a] - mx[a]) * (xs[b] - mx[b])).mean()
            syy[a, b] = ((ys[a] - my[a]) * (ys[b] - my[b])).mean()
            sxy[a, b] = ((xs[a] - mx[a]) * (ys[b] - my[b])).mean()
    return sxx, sxy, syy


def _window_score(qvals, qmask, tvals, tmask, scheme, weights, epsilon):
    """Score one pose from the scheme definitions (no shared kernels)."""
    mask = qmask & tmask
    n = int(mask.sum())
    if n < 2:
        return None, n
    xs = qvals[:, mask]
    ys = tvals[:, mask]
    C = xs.shape[0]

    def offsets(vals, scope):
        if scope is StatScope.LOCAL_VOLUME:
            return np.full(C, vals.mean())
        if scope is StatScope.LOCAL_CHANNEL:
            return vals.mean(axis=1)
        return np.zeros(C)

    def scales(vals, scope):
        if scope is StatScope.LOCAL_VOLUME:
            return np.full(C, vals.std() + epsilon)
        if scope is StatScope.LOCAL_CHANNEL:
            return vals.std(axis=1) + epsilon
        return np.ones(C)

    ax = offsets(xs, scheme.centering)
    ay = offsets(ys, scheme.centering)
    dx = scales(xs, scheme.scaling)
    dy = scales(ys, scheme.scaling)
    score = 0.0
    for c in range(C):
        cross = ((xs[c] - ax[c]) * (ys[c] - ay[c])).mean()
        denom = dx[c] * dy[c]
        score += weights[c] * (cross / denom if denom > 0 else 0.0)
    return float(score), n


def naive_search(query, target, cfg, scheme, weights=None, epsilon=1e-5):
    """Per-pose recomputation oracle for the alignment search.

    Scans the same grid, recomputing local statistics per pose, and
    applies the same lexicographic (dy, dx, angle) tie-break.
    """
    C = query.channels
    w = np.full(C, 1.0 / C) if weights is None else np.asarray(weights)
    h, wd = query.spatial_shape
    H, W = target.spatial_shape
    min_count = max(2.0, cfg.min_overlap_fraction * h * wd)
    tmask_full = target.valid_mask()
    best = None
    for angle in cfg.angles():
        rq = rotate(query, float(angle))
        qmask = rq.valid_mask()
        for dyi in range(0, H - h + 1, cfg.translation_stride):
            for dxi in range(0, W - wd + 1, cfg.translation_stride):
                tmask = tmask_full[dyi : dyi + h, dxi : dxi + wd]
                tvals = target.values[:, dyi : dyi + h, dxi : dxi + wd]
                score, n = _window_score(
                    rq.values, qmask, tvals, tmask, scheme, w, epsilon
                )
                if score is None or n < min_count:
                    continue
                cand = (score, dyi, dxi, float(angle), n)
                if best is None or cand[0] > best[0] or (
                    cand[0] == best[0] and cand[1:4] < best[1:4]
                ):
                    best = cand
    return best  # (score, dy, dx, angle, overlap) or None


def finite_difference(func, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += step
        xm = x0.copy()
        xm[idx] -= step
        grad[idx] = (func(xp) - func(xm)) / (2 * step)
        it.iternext()
    return grad


def ap_oracle(relevance) -> float:
    """Average precision by direct enumeration of the ranked list."""
    hits = 0
    total = 0.0
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / hits


def pr_oracle(scores, relevance):
    """One (recall, precision) point per threshold between distinct scores."""
    total = sum(relevance)
    points = []
    for k in range(1, len(scores) + 1):
        if k < len(scores) and scores[k] == scores[k - 1]:
            continue  # same threshold class
        taken = relevance[:k]
        points.append((sum(taken) / total, sum(taken) / k))
    return points


def cmc_oracle(ranks, db_size):
    return [sum(1 for r in ranks if r <= k) / len(ranks) for k in range(1, db_size + 1)]


def expected_ap_random(n: int, r: int) -> float:
    """Analytic E[AP] of a uniformly random ranking of r relevant in n."""
    return sum((1 + (k - 1) * (r - 1) / (n - 1)) / k for k in range(1, n + 1)) / n


def all_relevance_orderings(n: int, r: int):
    """Every distinct placement of r relevant flags in n slots."""
    for positions in itertools.combinations(range(n), r):
        pattern = [False] * n
        for p in positions:
            pattern[p] = True
        yield pattern
