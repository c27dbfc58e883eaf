"""Sliding-pose accumulation kernels.

The alignment search spends essentially all of its time summing masked
window products for every candidate translation.  Two interchangeable
backends compute those sums:

* ``numba`` - compiled nested loops (default when numba imports),
* ``numpy`` - ``sliding_window_view`` + einsum contractions.

Set ``MCNCC_PURE_NUMPY=1`` to force the numpy path (also the automatic
fallback when numba is unavailable).  Both backends return identical
sums up to float summation order; the scoring layer treats them as
equal within 1e-9.  ``benchmarks/bench_kernels.py`` times one against
the other.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pure_numpy_requested() -> bool:
    return os.environ.get("MCNCC_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes"}


try:  # pragma: no cover - exercised implicitly by backend selection
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        return wrap


def default_backend() -> str:
    if HAVE_NUMBA and not _pure_numpy_requested():
        return "numba"
    return "numpy"


def _scan_sums_loops(q, qmask, t, tmask, stride):
    """Masked window sums for every stride-aligned placement of q over t.

    Returns (n, sx, sy, sxx, syy, sxy): n has shape (Py, Px); the rest
    (C, Py, Px).  Sums run over pixels where both masks hold.
    """
    C, h, w = q.shape
    H, W = t.shape[1], t.shape[2]
    Py = (H - h) // stride + 1
    Px = (W - w) // stride + 1

    n = np.zeros((Py, Px), dtype=np.float64)
    sx = np.zeros((C, Py, Px), dtype=np.float64)
    sy = np.zeros((C, Py, Px), dtype=np.float64)
    sxx = np.zeros((C, Py, Px), dtype=np.float64)
    syy = np.zeros((C, Py, Px), dtype=np.float64)
    sxy = np.zeros((C, Py, Px), dtype=np.float64)

    for py in range(Py):
        dy = py * stride
        for px in range(Px):
            dx = px * stride
            cnt = 0.0
            for i in range(h):
                for j in range(w):
                    if qmask[i, j] and tmask[dy + i, dx + j]:
                        cnt += 1.0
            n[py, px] = cnt
            if cnt == 0.0:
                continue
            for c in range(C):
                a_sx = 0.0
                a_sy = 0.0
                a_sxx = 0.0
                a_syy = 0.0
                a_sxy = 0.0
                for i in range(h):
                    for j in range(w):
                        if qmask[i, j] and tmask[dy + i, dx + j]:
                            xv = q[c, i, j]
                            yv = t[c, dy + i, dx + j]
                            a_sx += xv
                            a_sy += yv
                            a_sxx += xv * xv
                            a_syy += yv * yv
                            a_sxy += xv * yv
                sx[c, py, px] = a_sx
                sy[c, py, px] = a_sy
                sxx[c, py, px] = a_sxx
                syy[c, py, px] = a_syy
                sxy[c, py, px] = a_sxy
    return n, sx, sy, sxx, syy, sxy


if HAVE_NUMBA:
    _scan_sums_numba = njit(cache=True, nogil=True)(_scan_sums_loops)


def _scan_sums_numpy(q, qmask, t, tmask, stride):
    C, h, w = q.shape
    qm = qmask.astype(np.float64)
    tm = tmask.astype(np.float64)

    qv = q * qm
    qv2 = q * qv
    tv = t * tm
    tv2 = t * tv

    s = stride
    tm_win = sliding_window_view(tm, (h, w))[::s, ::s]
    n = np.einsum("abij,ij->ab", tm_win, qm, optimize=True)
    sx = np.einsum("abij,cij->cab", tm_win, qv, optimize=True)
    sxx = np.einsum("abij,cij->cab", tm_win, qv2, optimize=True)

    tv_win = sliding_window_view(tv, (h, w), axis=(1, 2))[:, ::s, ::s]
    sy = np.einsum("cabij,ij->cab", tv_win, qm, optimize=True)
    sxy = np.einsum("cabij,cij->cab", tv_win, qv, optimize=True)

    tv2_win = sliding_window_view(tv2, (h, w), axis=(1, 2))[:, ::s, ::s]
    syy = np.einsum("cabij,ij->cab", tv2_win, qm, optimize=True)
    return n, sx, sy, sxx, syy, sxy


def scan_sums(q, qmask, t, tmask, stride=1, backend: str | None = None):
    """Dispatch masked sliding sums to the selected backend.

    q: (C, h, w) float64, qmask: (h, w) bool, t: (C, H, W) float64,
    tmask: (H, W) bool.  Placements are (dy, dx) = (py*stride, px*stride)
    with the window fully inside the target.
    """
    if backend is None:
        backend = default_backend()
    q = np.ascontiguousarray(q, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    qmask = np.ascontiguousarray(qmask, dtype=bool)
    tmask = np.ascontiguousarray(tmask, dtype=bool)
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _scan_sums_numba(q, qmask, t, tmask, stride)
    if backend == "numpy":
        return _scan_sums_numpy(q, qmask, t, tmask, stride)
    raise ValueError(f"unknown kernel backend {backend!r}")
