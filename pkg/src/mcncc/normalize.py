"""Centering/scaling schemes and dataset-level (global) statistics.

The scheme lattice covers every combination of where the centering mean
and the scaling deviation come from: nowhere, the local 3-D feature
volume, the local per-channel statistics, or per-channel statistics
pooled over a whole dataset.  Named presets cover the standard variants;
arbitrary combinations are constructible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, DimensionMismatchError, McnccError
from .tensor import (
    DEFAULT_EPSILON,
    FeatureMap,
    SupportRegion,
    _as_locked_array,
    effective_mask,
)


class StatScope(Enum):
    """Where a centering mean or scaling deviation is estimated."""

    NONE = "none"
    LOCAL_VOLUME = "volume"  # one statistic over all C*|P| values of the map
    LOCAL_CHANNEL = "channel"  # per-channel statistics over |P|
    GLOBAL_CHANNEL = "global"  # per-channel statistics pooled over a dataset


@dataclass(frozen=True)
class NormalizationScheme:
    centering: StatScope
    scaling: StatScope

    @property
    def needs_global(self) -> bool:
        return StatScope.GLOBAL_CHANNEL in (self.centering, self.scaling)

    @classmethod
    def parse(cls, text: str) -> "NormalizationScheme":
        """Parse a preset name or a "centering,scaling" pair.

        Tokens are the StatScope values: none, volume, channel, global.
        """
        if text in SCHEME_PRESETS:
            return SCHEME_PRESETS[text]
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ConfigurationError(
                f"unknown scheme {text!r}; expected a preset "
                f"({', '.join(sorted(SCHEME_PRESETS))}) or 'centering,scaling'"
            )
        try:
            return cls(StatScope(parts[0]), StatScope(parts[1]))
        except ValueError as exc:
            raise ConfigurationError(f"unknown scheme component in {text!r}") from exc


# The raw/center/standardize ladder at each granularity, plus the
# cosine-style baseline that scales without centering.
SCHEME_PRESETS = {
    "raw": NormalizationScheme(StatScope.NONE, StatScope.NONE),
    "center-volume": NormalizationScheme(StatScope.LOCAL_VOLUME, StatScope.NONE),
    "standardize-volume": NormalizationScheme(StatScope.LOCAL_VOLUME, StatScope.LOCAL_VOLUME),
    "center-channel": NormalizationScheme(StatScope.LOCAL_CHANNEL, StatScope.NONE),
    "standardize-channel": NormalizationScheme(StatScope.LOCAL_CHANNEL, StatScope.LOCAL_CHANNEL),
    "center-global": NormalizationScheme(StatScope.GLOBAL_CHANNEL, StatScope.NONE),
    "standardize-global": NormalizationScheme(StatScope.GLOBAL_CHANNEL, StatScope.GLOBAL_CHANNEL),
    "cosine": NormalizationScheme(StatScope.NONE, StatScope.LOCAL_VOLUME),
}


@dataclass(frozen=True)
class GlobalStats:
    """Per-channel mean/std pooled over every valid pixel of a dataset."""

    means: np.ndarray
    stddevs: np.ndarray
    sample_count: int  # number of maps aggregated

    def __post_init__(self):
        means = _as_locked_array(self.means, dtype=np.float64, ndim=1, name="means")
        stds = _as_locked_array(self.stddevs, dtype=np.float64, ndim=1, name="stddevs")
        if means.shape != stds.shape:
            raise DimensionMismatchError("global means and stddevs must have equal length")
        if np.any(stds < 0):
            raise ValueError("global standard deviations must be nonnegative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stds)

    @property
    def channels(self) -> int:
        return self.means.shape[0]


def fit_global_stats(dataset: Iterable[FeatureMap]) -> GlobalStats:
    """Pool per-channel mean/std over all valid pixels of all maps.

    Single pass; partial statistics are merged with Chan's update so the
    result is stable and deterministic under dataset order.
    """
    count = 0
    n_total = None
    mean = None
    m2 = None
    channels = None
    for fmap in dataset:
        if channels is None:
            channels = fmap.channels
            n_total = np.zeros(channels, dtype=np.float64)
            mean = np.zeros(channels, dtype=np.float64)
            m2 = np.zeros(channels, dtype=np.float64)
        elif fmap.channels != channels:
            raise DimensionMismatchError(
                f"channel mismatch in dataset: {fmap.channels} != {channels}"
            )
        sel = fmap.values[:, fmap.valid_mask()].astype(np.float64, copy=False)
        n_b = sel.shape[1]
        if n_b == 0:
            continue
        mean_b = sel.mean(axis=1)
        m2_b = ((sel - mean_b[:, None]) ** 2).sum(axis=1)
        delta = mean_b - mean
        n_new = n_total + n_b
        mean = mean + delta * (n_b / n_new)
        m2 = m2 + m2_b + delta**2 * (n_total * n_b / n_new)
        n_total = n_new
        count += 1
    if count == 0:
        raise McnccError("cannot fit global statistics on an empty dataset")
    stds = np.sqrt(np.maximum(m2 / n_total, 0.0))
    return GlobalStats(means=mean, stddevs=stds, sample_count=count)


def _resolve_offsets_and_scales(fmap, mask, scheme, global_stats, epsilon):
    """Per-channel centering offsets and scaling denominators for one map."""
    C = fmap.channels
    sel = fmap.values[:, mask].astype(np.float64, copy=False)

    if scheme.needs_global:
        if global_stats is None:
            raise ConfigurationError("scheme references global statistics but none were given")
        if global_stats.channels != C:
            raise DimensionMismatchError(
                f"global stats for {global_stats.channels} channels, map has {C}"
            )

    def mean_for(scope):
        if scope is StatScope.LOCAL_VOLUME:
            return np.full(C, sel.mean())
        if scope is StatScope.LOCAL_CHANNEL:
            return sel.mean(axis=1)
        if scope is StatScope.GLOBAL_CHANNEL:
            return global_stats.means.copy()
        return np.zeros(C)

    offsets = mean_for(scheme.centering)

    scale = np.ones(C)
    if scheme.scaling is StatScope.LOCAL_VOLUME:
        scale = np.full(C, np.sqrt(max(sel.var(), 0.0)) + epsilon)
    elif scheme.scaling is StatScope.LOCAL_CHANNEL:
        scale = np.sqrt(np.maximum(sel.var(axis=1), 0.0)) + epsilon
    elif scheme.scaling is StatScope.GLOBAL_CHANNEL:
        scale = global_stats.stddevs + epsilon
    return offsets, scale


def apply_scheme(
    fmap: FeatureMap,
    region: SupportRegion,
    scheme: NormalizationScheme,
    global_stats: GlobalStats | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> FeatureMap:
    """Apply one centering/scaling combination to a map.

    Local statistics are estimated over `region` (intersected with the
    map's validity mask); the resulting per-channel affine transform is
    applied to every pixel.
    """
    if scheme.centering is StatScope.NONE and scheme.scaling is StatScope.NONE:
        return fmap
    mask = effective_mask(fmap, region)
    offsets, scale = _resolve_offsets_and_scales(fmap, mask, scheme, global_stats, epsilon)
    centered = fmap.values - offsets[:, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(scale[:, None, None] > 0, centered / scale[:, None, None], 0.0)
    return fmap.with_values(out)
