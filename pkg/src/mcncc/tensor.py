"""Feature-map container and per-region statistics.

A feature map is a stack of C single-channel images sharing one spatial
grid, stored channel-major (C, H, W) in row-major order.  Every other
module operates on these maps through the pure functions below; maps are
frozen at construction and safe to share across threads.

Statistics use the population convention (divisor |P|): the normalized
correlation downstream estimates expectations over the support region,
not unbiased sample moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, DegenerateRegionError, DimensionMismatchError

# Added to every standard deviation before division.  Keeps constant
# channels contributing zero correlation instead of NaN.
DEFAULT_EPSILON = 1e-5

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_locked_array(values, dtype=None, ndim=None, name="array"):
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionMismatchError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    if arr.flags.owndata:
        arr.setflags(write=False)
    else:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Immutable C-channel 2-D feature tensor.

    Parameters
    ----------
    values : array (C, H, W)
        Channel-major, row-major feature values.  Must be finite.
    domain_tag : str
        Label identifying the source domain (e.g. "print" vs "impression").
    valid : bool array (H, W), optional
        Per-pixel validity.  None means every pixel is valid.  Pixels
        marked invalid (e.g. resampled from outside the frame by
        :func:`rotate`) are excluded from any support region used on
        this map.
    """

    values: np.ndarray
    domain_tag: str = ""
    valid: np.ndarray | None = None

    def __post_init__(self):
        arr = _as_locked_array(self.values, ndim=3, name="values")
        if min(arr.shape) < 1:
            raise DimensionMismatchError(f"empty feature map shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map values must be finite")
        object.__setattr__(self, "values", arr)
        if self.valid is not None:
            mask = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
            if mask.shape != arr.shape[1:]:
                raise DimensionMismatchError(
                    f"validity mask shape {mask.shape} != spatial shape {arr.shape[1:]}"
                )
            if mask.all():
                mask = None  # normalize the all-valid case
            else:
                mask = mask.copy()
                mask.setflags(write=False)
            object.__setattr__(self, "valid", mask)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def valid_mask(self) -> np.ndarray:
        """Validity as a concrete (H, W) bool array."""
        if self.valid is None:
            return np.ones(self.spatial_shape, dtype=bool)
        return np.asarray(self.valid)

    def channel(self, c: int) -> np.ndarray:
        """Read-only (H, W) view of one channel."""
        return self.values[c]

    def with_values(self, values: np.ndarray, domain_tag: str | None = None) -> "FeatureMap":
        """New map with replaced values, keeping tag and validity."""
        return FeatureMap(
            values,
            domain_tag=self.domain_tag if domain_tag is None else domain_tag,
            valid=self.valid,
        )


@dataclass(frozen=True)
class SupportRegion:
    """Set of pixel positions over which statistics are estimated.

    Wraps an (H, W) boolean mask; |P| must be at least 2 since the
    variance of a single sample is undefined.
    """

    mask: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if mask.ndim != 2:
            raise DimensionMismatchError(f"region mask must be 2-D, got shape {mask.shape}")
        if int(mask.sum()) < 2:
            raise DegenerateRegionError(f"support region has {int(mask.sum())} pixels, need >= 2")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def full(cls, height: int, width: int) -> "SupportRegion":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def for_map(cls, fmap: FeatureMap) -> "SupportRegion":
        """Full-frame region intersected with the map's validity mask."""
        return cls(fmap.valid_mask())

    @classmethod
    def rect(cls, top: int, left: int, h: int, w: int, shape: tuple[int, int]) -> "SupportRegion":
        H, W = shape
        if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
            raise BoundsError(f"rectangle ({top},{left},{h},{w}) outside map of shape {shape}")
        mask = np.zeros(shape, dtype=bool)
        mask[top : top + h, left : left + w] = True
        return cls(mask)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation over a region."""

    means: np.ndarray
    stddevs: np.ndarray
    support_size: int

    def __post_init__(self):
        means = _as_locked_array(self.means, dtype=np.float64, ndim=1, name="means")
        stds = _as_locked_array(self.stddevs, dtype=np.float64, ndim=1, name="stddevs")
        if means.shape != stds.shape:
            raise DimensionMismatchError("means and stddevs must have equal length")
        if np.any(stds < 0):
            raise ValueError("standard deviations must be nonnegative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stds)


def effective_mask(fmap: FeatureMap, region: SupportRegion) -> np.ndarray:
    """Region mask intersected with the map's validity; checked for size.

    Raises BoundsError on geometry mismatch and DegenerateRegionError if
    fewer than 2 pixels survive the intersection.
    """
    if region.shape != fmap.spatial_shape:
        raise BoundsError(
            f"region of shape {region.shape} does not fit map of shape {fmap.spatial_shape}"
        )
    if fmap.valid is None:
        return np.asarray(region.mask)
    mask = region.mask & fmap.valid
    if int(mask.sum()) < 2:
        raise DegenerateRegionError("fewer than 2 valid pixels in support region")
    return mask


def channel_stats(fmap: FeatureMap, region: SupportRegion) -> ChannelStats:
    """Per-channel sample mean and population standard deviation over P."""
    mask = effective_mask(fmap, region)
    sel = fmap.values[:, mask].astype(np.float64, copy=False)  # (C, |P|)
    means = sel.mean(axis=1)
    stds = np.sqrt(np.maximum(sel.var(axis=1), 0.0))
    return ChannelStats(means=means, stddevs=stds, support_size=sel.shape[1])


def standardize(
    fmap: FeatureMap,
    region: SupportRegion,
    stats: ChannelStats,
    epsilon: float = DEFAULT_EPSILON,
) -> FeatureMap:
    """Per-channel affine map (x - mean) / (std + epsilon).

    The affine transform is applied to every pixel; the statistics
    themselves come from the caller (normally via :func:`channel_stats`
    over `region`).  A constant channel maps to zeros when epsilon > 0.
    """
    if stats.means.shape[0] != fmap.channels:
        raise DimensionMismatchError(
            f"stats for {stats.means.shape[0]} channels, map has {fmap.channels}"
        )
    effective_mask(fmap, region)  # geometry check only
    denom = stats.stddevs + epsilon
    centered = fmap.values - stats.means[:, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom[:, None, None] > 0, centered / denom[:, None, None], 0.0)
    return fmap.with_values(out)


def extract_patch(fmap: FeatureMap, top: int, left: int, h: int, w: int) -> FeatureMap:
    """Copy the (h, w) window at (top, left); domain tag is preserved."""
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > fmap.height or left + w > fmap.width:
        raise BoundsError(
            f"window ({top},{left},{h},{w}) outside map of shape {fmap.spatial_shape}"
        )
    values = fmap.values[:, top : top + h, left : left + w]
    valid = None if fmap.valid is None else fmap.valid[top : top + h, left : left + w]
    return FeatureMap(values, domain_tag=fmap.domain_tag, valid=valid)


# In-bounds slack for rotations whose source grid coincides with the pixel
# grid (multiples of 90 degrees); pure float rounding must not invalidate
# border pixels.
_EDGE_SLACK = 1e-9


def rotate(fmap: FeatureMap, angle_degrees: float) -> FeatureMap:
    """Bilinear rotation about the map center.

    Positive angles turn the content counterclockwise (rows increase
    downward).  Output pixels whose source location falls outside the
    frame, or touches an invalid input pixel, are marked invalid and
    carry value 0.  Rotation by exactly 0 returns the input unchanged.
    """
    if not np.isfinite(angle_degrees):
        raise ValueError("rotation angle must be finite")
    if angle_degrees == 0.0:
        return fmap

    H, W = fmap.spatial_shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rad = np.deg2rad(angle_degrees)
    cos_a, sin_a = np.cos(rad), np.sin(rad)

    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # Inverse transform: where in the source does each output pixel come from.
    sy = cy + cos_a * dy + sin_a * dx
    sx = cx - sin_a * dy + cos_a * dx

    inside = (
        (sy >= -_EDGE_SLACK)
        & (sy <= H - 1 + _EDGE_SLACK)
        & (sx >= -_EDGE_SLACK)
        & (sx <= W - 1 + _EDGE_SLACK)
    )
    sy = np.clip(sy, 0.0, H - 1)
    sx = np.clip(sx, 0.0, W - 1)

    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = sy - y0
    fx = sx - x0

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    vals = fmap.values
    out = (
        vals[:, y0, x0] * w00
        + vals[:, y0, x1] * w01
        + vals[:, y1, x0] * w10
        + vals[:, y1, x1] * w11
    )

    valid = inside
    if fmap.valid is not None:
        src_valid = fmap.valid
        # A sample is valid only if every neighbor it draws weight from is.
        touch_ok = (
            (src_valid[y0, x0] | (w00 == 0))
            & (src_valid[y0, x1] | (w01 == 0))
            & (src_valid[y1, x0] | (w10 == 0))
            & (src_valid[y1, x1] | (w11 == 0))
        )
        valid = valid & touch_ok
    out[:, ~valid] = 0.0
    return FeatureMap(out.astype(fmap.values.dtype, copy=False), domain_tag=fmap.domain_tag, valid=valid)
