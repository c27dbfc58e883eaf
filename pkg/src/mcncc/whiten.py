"""Global decorrelation: per-domain PCA and cross-domain CCA projections.

Samples are N-dimensional pixel feature vectors (one per spatial
location); a fitted projection maps a map's channels to K decorrelated,
unit-variance channels so the diagonal-covariance correlation becomes
exact on the training distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatchError, McnccError, NumericalError
from .tensor import FeatureMap, _as_locked_array

_RANK_TOL = 1e-12


@dataclass(frozen=True)
class Projection:
    """Linear map x -> matrix @ (x - mean) from N to K channels."""

    matrix: np.ndarray  # (K, N)
    mean: np.ndarray  # (N,)
    domain_tag: str = ""

    def __post_init__(self):
        mat = _as_locked_array(self.matrix, dtype=np.float64, ndim=2, name="matrix")
        mean = _as_locked_array(self.mean, dtype=np.float64, ndim=1, name="mean")
        if mat.shape[0] > mat.shape[1]:
            raise DimensionMismatchError(
                f"projection must not increase dimensionality, got shape {mat.shape}"
            )
        if mat.shape[1] != mean.shape[0]:
            raise DimensionMismatchError(
                f"matrix columns {mat.shape[1]} != mean length {mean.shape[0]}"
            )
        if not (np.all(np.isfinite(mat)) and np.all(np.isfinite(mean))):
            raise ValueError("projection entries must be finite")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "mean", mean)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def identity(cls, n: int, domain_tag: str = "") -> "Projection":
        return cls(np.eye(n), np.zeros(n), domain_tag=domain_tag)


class CcaResult(NamedTuple):
    proj_x: Projection
    proj_y: Projection
    correlations: np.ndarray  # (K,), non-increasing


def _canonical_row_signs(matrix: np.ndarray) -> np.ndarray:
    """Sign flips making the largest-magnitude entry of each row positive."""
    idx = np.argmax(np.abs(matrix), axis=1)
    picked = matrix[np.arange(matrix.shape[0]), idx]
    signs = np.where(picked < 0, -1.0, 1.0)
    return signs


def _covariance(centered: np.ndarray) -> np.ndarray:
    return centered.T @ centered / centered.shape[0]


def _inverse_sqrt(cov: np.ndarray, ridge: float, label: str):
    evals, evecs = np.linalg.eigh(cov + ridge * np.eye(cov.shape[0]))
    if evals.min() <= _RANK_TOL * max(evals.max(), 1.0):
        raise NumericalError(
            f"{label} covariance is rank deficient "
            f"(min eigenvalue {evals.min():.3e}); supply a positive ridge"
        )
    return (evecs / np.sqrt(evals)) @ evecs.T


def default_ridge(cov: np.ndarray) -> float:
    """1e-4 times the mean diagonal; guards desk-scale sample counts."""
    return 1e-4 * float(np.trace(cov)) / cov.shape[0]


def fit_pca(
    samples: np.ndarray,
    k: int,
    ridge: float | None = None,
    domain_tag: str = "",
) -> Projection:
    """Whitening PCA: top-k eigenvectors scaled to unit variance.

    Eigenvector signs follow a deterministic convention (largest
    magnitude entry positive) so fits are reproducible.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DimensionMismatchError("samples must be a (count, N) matrix")
    m, n = samples.shape
    if k > n:
        raise DimensionMismatchError(f"k={k} exceeds input dimension {n}")
    if m <= k:
        raise McnccError(f"need more than k={k} samples, got {m}")
    mean = samples.mean(axis=0)
    cov = _covariance(samples - mean)
    if ridge is None:
        ridge = default_ridge(cov)
    evals, evecs = np.linalg.eigh(cov + ridge * np.eye(n))
    order = np.argsort(evals)[::-1][:k]
    lead = evals[order]
    if lead.min() <= _RANK_TOL * max(evals.max(), 1.0):
        raise NumericalError(
            f"covariance rank below k={k} (eigenvalue {lead.min():.3e}); "
            "supply a positive ridge"
        )
    components = evecs[:, order].T  # (k, n)
    components = components * _canonical_row_signs(components)[:, None]
    matrix = components / np.sqrt(lead)[:, None]
    return Projection(matrix=matrix, mean=mean, domain_tag=domain_tag)


def fit_cca(
    samples_x: np.ndarray,
    samples_y: np.ndarray,
    k: int,
    ridge: float | None = None,
    domain_tag_x: str = "x",
    domain_tag_y: str = "y",
) -> CcaResult:
    """Canonical correlation analysis via whitened cross-covariance SVD.

    Rows of the two sample matrices are paired.  Both projections whiten
    their domain (identity covariance on the training data when ridge is
    0) and are ordered by decreasing canonical correlation.
    """
    xs = np.asarray(samples_x, dtype=np.float64)
    ys = np.asarray(samples_y, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2:
        raise DimensionMismatchError("samples must be (count, N) matrices")
    if xs.shape[0] != ys.shape[0]:
        raise DimensionMismatchError(
            f"paired sample counts differ: {xs.shape[0]} != {ys.shape[0]}"
        )
    m = xs.shape[0]
    nx, ny = xs.shape[1], ys.shape[1]
    if k > min(nx, ny):
        raise DimensionMismatchError(f"k={k} exceeds min input dimension {min(nx, ny)}")
    if m < k + 2:
        raise McnccError(f"need at least k+2={k + 2} pairs, got {m}")

    mean_x = xs.mean(axis=0)
    mean_y = ys.mean(axis=0)
    xc = xs - mean_x
    yc = ys - mean_y
    cxx = _covariance(xc)
    cyy = _covariance(yc)
    cxy = xc.T @ yc / m
    ridge_x = default_ridge(cxx) if ridge is None else ridge
    ridge_y = default_ridge(cyy) if ridge is None else ridge
    isx = _inverse_sqrt(cxx, ridge_x, "first-domain")
    isy = _inverse_sqrt(cyy, ridge_y, "second-domain")

    u, s, vt = np.linalg.svd(isx @ cxy @ isy)
    mat_x = (isx @ u[:, :k]).T  # (k, nx)
    mat_y = (isy @ vt[:k].T).T  # (k, ny)
    # One sign convention for x rows, mirrored onto y so correlations stay
    # positive.
    signs = _canonical_row_signs(mat_x)
    mat_x = mat_x * signs[:, None]
    mat_y = mat_y * signs[:, None]
    return CcaResult(
        proj_x=Projection(mat_x, mean_x, domain_tag=domain_tag_x),
        proj_y=Projection(mat_y, mean_y, domain_tag=domain_tag_y),
        correlations=s[:k].copy(),
    )


def apply_projection(fmap: FeatureMap, proj: Projection) -> FeatureMap:
    """Project every pixel's channel vector; spatial layout unchanged."""
    if fmap.channels != proj.n:
        raise DimensionMismatchError(
            f"map has {fmap.channels} channels, projection expects {proj.n}"
        )
    centered = fmap.values - proj.mean[:, None, None]
    out = np.einsum("kn,nhw->khw", proj.matrix, centered)
    return FeatureMap(out, domain_tag=proj.domain_tag, valid=fmap.valid)


def pixel_samples(maps, max_pixels: int | None = None, seed: int = 0) -> np.ndarray:
    """Stack valid pixels of the given maps into a (count, C) matrix.

    Optionally subsamples to `max_pixels` rows with a seeded generator;
    deterministic under map order.
    """
    rows = []
    channels = None
    for fmap in maps:
        if channels is None:
            channels = fmap.channels
        elif fmap.channels != channels:
            raise DimensionMismatchError("maps disagree in channel count")
        rows.append(fmap.values[:, fmap.valid_mask()].T)
    if not rows:
        raise McnccError("no maps supplied for sampling")
    samples = np.concatenate(rows, axis=0)
    if max_pixels is not None and samples.shape[0] > max_pixels:
        rng = np.random.default_rng(seed)
        idx = rng.choice(samples.shape[0], size=max_pixels, replace=False)
        samples = samples[np.sort(idx)]
    return np.ascontiguousarray(samples, dtype=np.float64)
