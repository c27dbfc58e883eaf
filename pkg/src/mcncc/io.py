"""Bit-exact file formats, dataset manifests, and pixel featurization.

Tensor files ("XCT1") hold one little-endian array:

    magic   4 bytes  b"XCT1"
    dtype   1 byte   0 = float32, 1 = float64
    rank    1 byte
    dims    rank x uint32 little-endian
    payload product(dims) values, row-major (channel-major for maps)

Containers stack a single-line JSON header on top of concatenated
tensor records; model checkpoints, projections, channel weights, and
global statistics all use them.  Round trips are bit-identical and
dtype conversions are explicit, never implicit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .correlate import ChannelWeights
from .errors import ConfigurationError, ManifestError, TensorFormatError
from .learn import SiameseModel
from .normalize import GlobalStats
from .tensor import FeatureMap
from .whiten import Projection

MAGIC = b"XCT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_ELEMENTS = 1 << 40  # dims product guard


def _encode_array(arr: np.ndarray, dtype=None) -> bytes:
    arr = np.asarray(arr)
    target = np.dtype(dtype) if dtype is not None else arr.dtype
    if np.dtype(target) not in _CODES_BY_KIND:
        raise TensorFormatError(f"unsupported dtype {target}; use float32 or float64")
    if arr.dtype != target:
        arr = arr.astype(target)
    arr = np.ascontiguousarray(arr)
    header = MAGIC + struct.pack("<BB", _CODES_BY_KIND[np.dtype(target)], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + payload


def _decode_array(buf: bytes, offset: int = 0):
    """Returns (array, next_offset); errors carry the failing byte offset."""
    base = offset
    if len(buf) - base < 6:
        raise TensorFormatError(f"truncated header at byte {base}: need 6 bytes")
    if buf[base : base + 4] != MAGIC:
        raise TensorFormatError(
            f"bad magic {buf[base:base + 4]!r} at byte {base}, expected {MAGIC!r}"
        )
    code, rank = struct.unpack_from("<BB", buf, base + 4)
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code} at byte {base + 4}")
    dims_off = base + 6
    if len(buf) - dims_off < 4 * rank:
        raise TensorFormatError(f"truncated dims at byte {dims_off}: need {4 * rank} bytes")
    dims = struct.unpack_from(f"<{rank}I", buf, dims_off)
    count = 1
    for d in dims:
        count *= int(d)
        if count > _MAX_ELEMENTS:
            raise TensorFormatError(f"dims {dims} overflow at byte {dims_off}")
    dtype = _DTYPE_CODES[code]
    payload_off = dims_off + 4 * rank
    nbytes = count * dtype.itemsize
    if len(buf) - payload_off < nbytes:
        raise TensorFormatError(
            f"truncated payload at byte {payload_off}: expected {nbytes} bytes, "
            f"have {len(buf) - payload_off}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=payload_off).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), payload_off + nbytes


def _check_narrowing(stored: np.dtype, requested, allow_narrowing: bool):
    requested = np.dtype(requested)
    if requested.itemsize < stored.itemsize and not allow_narrowing:
        raise TensorFormatError(
            f"refusing implicit narrowing from {stored} to {requested}; "
            "pass allow_narrowing=True (--allow-narrowing)"
        )
    return requested


def write_array(path, arr, dtype=None) -> None:
    Path(path).write_bytes(_encode_array(arr, dtype))


def read_array(path, dtype=None, allow_narrowing: bool = False) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _decode_array(buf)
    if end != len(buf):
        raise TensorFormatError(f"{end} bytes parsed but file has {len(buf)}")
    if dtype is not None:
        arr = arr.astype(_check_narrowing(arr.dtype, dtype, allow_narrowing))
    return arr


def write_tensor(fmap: FeatureMap, path, dtype=None) -> None:
    write_array(path, fmap.values, dtype)


def read_tensor(path, domain_tag: str = "", dtype=None, allow_narrowing: bool = False) -> FeatureMap:
    arr = read_array(path, dtype=dtype, allow_narrowing=allow_narrowing)
    if arr.ndim != 3:
        raise TensorFormatError(f"feature map file must be rank 3, got rank {arr.ndim}")
    return FeatureMap(arr, domain_tag=domain_tag)


def save_container(path, header: dict, tensors: dict) -> None:
    """Single-line JSON header followed by named tensor records."""
    head = dict(header)
    head["tensors"] = list(tensors)
    blob = json.dumps(head, sort_keys=True).encode() + b"\n"
    for name in tensors:
        blob += _encode_array(np.asarray(tensors[name]))
    Path(path).write_bytes(blob)


def load_container(path):
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise TensorFormatError("container missing header line")
    try:
        header = json.loads(buf[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"container header is not JSON: {exc}") from exc
    offset = nl + 1
    tensors = {}
    for name in header.get("tensors", []):
        arr, offset = _decode_array(buf, offset)
        tensors[name] = arr
    if offset != len(buf):
        raise TensorFormatError(f"{offset} bytes parsed but file has {len(buf)}")
    return header, tensors


def save_global_stats(path, stats: GlobalStats) -> None:
    save_container(
        path,
        {"kind": "global_stats", "sample_count": stats.sample_count},
        {"means": stats.means, "stddevs": stats.stddevs},
    )


def load_global_stats(path) -> GlobalStats:
    header, tensors = load_container(path)
    if header.get("kind") != "global_stats":
        raise TensorFormatError(f"expected global_stats container, got {header.get('kind')!r}")
    return GlobalStats(
        means=tensors["means"],
        stddevs=tensors["stddevs"],
        sample_count=int(header["sample_count"]),
    )


def save_projection(path, proj: Projection) -> None:
    save_container(
        path,
        {"kind": "projection", "domain_tag": proj.domain_tag},
        {"matrix": proj.matrix, "mean": proj.mean},
    )


def load_projection(path) -> Projection:
    header, tensors = load_container(path)
    if header.get("kind") != "projection":
        raise TensorFormatError(f"expected projection container, got {header.get('kind')!r}")
    return Projection(tensors["matrix"], tensors["mean"], domain_tag=header["domain_tag"])


def save_weights(path, weights: ChannelWeights) -> None:
    save_container(
        path,
        {"kind": "channel_weights", "bias": weights.bias},
        {"weights": weights.weights},
    )


def load_weights(path) -> ChannelWeights:
    header, tensors = load_container(path)
    if header.get("kind") != "channel_weights":
        raise TensorFormatError(f"expected channel_weights container, got {header.get('kind')!r}")
    return ChannelWeights(tensors["weights"], bias=float(header["bias"]))


def save_model(path, model: SiameseModel, seed: int = 0, regime: str = "") -> None:
    save_container(
        path,
        {
            "kind": "model",
            "alpha": model.alpha,
            "beta": model.beta,
            "bias": model.weights.bias,
            "seed": seed,
            "regime": regime,
            "domain_tag_x": model.proj_x.domain_tag,
            "domain_tag_y": model.proj_y.domain_tag,
        },
        {
            "proj_x_matrix": model.proj_x.matrix,
            "proj_x_mean": model.proj_x.mean,
            "proj_y_matrix": model.proj_y.matrix,
            "proj_y_mean": model.proj_y.mean,
            "weights": model.weights.weights,
        },
    )


def load_model(path) -> SiameseModel:
    header, tensors = load_container(path)
    if header.get("kind") != "model":
        raise TensorFormatError(f"expected model container, got {header.get('kind')!r}")
    return SiameseModel(
        proj_x=Projection(
            tensors["proj_x_matrix"], tensors["proj_x_mean"], header["domain_tag_x"]
        ),
        proj_y=Projection(
            tensors["proj_y_matrix"], tensors["proj_y_mean"], header["domain_tag_y"]
        ),
        weights=ChannelWeights(tensors["weights"], bias=float(header["bias"])),
        alpha=float(header["alpha"]),
        beta=float(header["beta"]),
    )


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    role: str  # "query" or "database"
    domain_tag: str
    path: str
    group_id: str
    area_ratio: float | None = None


@dataclass(frozen=True)
class Manifest:
    entries: tuple
    base_dir: Path

    @property
    def queries(self):
        return [e for e in self.entries if e.role == "query"]

    @property
    def database(self):
        return [e for e in self.entries if e.role == "database"]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path, closed_set: bool = True) -> Manifest:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise ManifestError("manifest must be a nonempty JSON array of records")
    entries = []
    seen = set()
    for i, rec in enumerate(records):
        missing = {"id", "role", "domain_tag", "path", "group_id"} - set(rec)
        if missing:
            raise ManifestError(f"record {i} missing fields: {sorted(missing)}")
        if rec["role"] not in ("query", "database"):
            raise ManifestError(f"record {i}: role must be query|database, got {rec['role']!r}")
        if rec["id"] in seen:
            raise ManifestError(f"duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        entries.append(
            ManifestEntry(
                item_id=str(rec["id"]),
                role=rec["role"],
                domain_tag=str(rec["domain_tag"]),
                path=str(rec["path"]),
                group_id=str(rec["group_id"]),
                area_ratio=float(rec["area_ratio"]) if "area_ratio" in rec else None,
            )
        )
    manifest = Manifest(entries=tuple(entries), base_dir=path.parent)
    if closed_set:
        db_groups = {e.group_id for e in manifest.database}
        for e in manifest.queries:
            if e.group_id not in db_groups:
                raise ManifestError(
                    f"query {e.item_id!r}: group {e.group_id!r} absent from database"
                )
    return manifest


# ---------------------------------------------------------------------------
# Pixel featurization

IMAGE_SUFFIXES = {".png", ".pgm"}


@dataclass(frozen=True)
class PixelFeaturizerConfig:
    mode: str = "gray"  # "gray" or "gradient-bank"
    orientations: int = 2
    blur_sigma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("gray", "gradient-bank"):
            raise ConfigurationError(f"unknown featurizer mode {self.mode!r}")
        if self.orientations < 1:
            raise ConfigurationError("orientations must be >= 1")

    @property
    def channels(self) -> int:
        return 1 if self.mode == "gray" else self.orientations


def featurize_pixels(
    image: np.ndarray,
    cfg: PixelFeaturizerConfig,
    domain_tag: str = "",
    valid: np.ndarray | None = None,
) -> FeatureMap:
    """Grayscale identity map, or a bank of oriented derivative responses."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ConfigurationError("featurizer expects a nonempty 2-D grayscale array")
    if cfg.mode == "gray":
        return FeatureMap(image[None], domain_tag=domain_tag, valid=valid)
    from scipy.ndimage import gaussian_filter

    smoothed = gaussian_filter(image, cfg.blur_sigma, mode="nearest") if cfg.blur_sigma > 0 else image
    gy, gx = np.gradient(smoothed)
    channels = []
    for k in range(cfg.orientations):
        theta = np.pi * k / cfg.orientations
        channels.append(np.cos(theta) * gx + np.sin(theta) * gy)
    return FeatureMap(np.stack(channels), domain_tag=domain_tag, valid=valid)


def read_image(path) -> np.ndarray:
    """8-bit grayscale PNG/PGM to a float array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ConfigurationError(f"unsupported image type {path.suffix!r}; use PNG or PGM")
    with Image.open(path) as img:
        if img.mode != "L":
            raise ConfigurationError(
                f"{path.name}: expected 8-bit grayscale, got mode {img.mode!r}; "
                "preprocess richer inputs upstream"
            )
        return np.asarray(img, dtype=np.float64) / 255.0


def load_entry_map(
    manifest: Manifest,
    entry: ManifestEntry,
    featurizer: PixelFeaturizerConfig | None = None,
    dtype=None,
    allow_narrowing: bool = False,
) -> FeatureMap:
    """Read an entry as a feature map: tensors directly, images featurized."""
    path = manifest.resolve(entry)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        cfg = featurizer or PixelFeaturizerConfig()
        return featurize_pixels(read_image(path), cfg, domain_tag=entry.domain_tag)
    return read_tensor(
        path, domain_tag=entry.domain_tag, dtype=dtype, allow_narrowing=allow_narrowing
    )
