"""Export intermediate backbone activations to XCT1 tensor files.

Layer names map to backbone modules through a pinned JSON config (see
``layers.json``) rather than code, and backbone weights are always
user-supplied: pass a ``state_dict`` file covering at least the layers
up to the tapped module (later layers never run).

Preprocessing is fixed and recorded in the export metadata: grayscale
input in [0, 1], optional shorter-side resize, channel replication to
RGB, and ImageNet mean/std normalization.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .tensorfile import write as write_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    pass


def load_layer_config(path=None) -> dict:
    if path is not None:
        return json.loads(Path(path).read_text())
    return json.loads(resources.files("feature_export").joinpath("layers.json").read_text())


@dataclass(frozen=True)
class ExportSpec:
    backbone: str
    layer: str
    module: str  # dotted module path inside the backbone
    channels: int
    resize: str = "none"  # "none" or "shorter:<pixels>"
    dtype: str = "float32"

    @classmethod
    def for_layer(cls, layer: str, resize: str = "none", dtype: str = "float32",
                  config: dict | None = None) -> "ExportSpec":
        config = config if config is not None else load_layer_config()
        if layer not in config:
            raise ExportError(
                f"unknown layer {layer!r}; configured layers: {sorted(config)}"
            )
        entry = config[layer]
        return cls(
            backbone=entry["backbone"],
            layer=layer,
            module=entry["module"],
            channels=int(entry["channels"]),
            resize=resize,
            dtype=dtype,
        )


def _build_backbone(name: str):
    from torchvision import models

    if name == "resnet50":
        return models.resnet50(weights=None)
    if name == "googlenet":
        return models.googlenet(weights=None, aux_logits=False, init_weights=True)
    if name == "vgg16":
        return models.vgg16(weights=None)
    raise ExportError(f"unsupported backbone {name!r}")


def _resolve_module(model, dotted: str):
    node = model
    for part in dotted.split("."):
        children = dict(node.named_children())
        if part not in children:
            raise ExportError(f"module {dotted!r} not found in backbone (missing {part!r})")
        node = children[part]
    return node


class _StopForward(Exception):
    pass


class ActivationExtractor:
    """Runs a backbone up to one module and captures its output.

    The forward pass is aborted right after the tapped module, so the
    supplied weights only need to cover the layers before it.
    """

    def __init__(self, spec: ExportSpec, weights_path):
        self.spec = spec
        model = _build_backbone(spec.backbone)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state, strict=False)
        model.eval()
        self.model = model
        self._captured = None
        module = _resolve_module(model, spec.module)
        module.register_forward_hook(self._hook)

    def _hook(self, module, inputs, output):
        self._captured = output.detach()
        raise _StopForward

    def activations(self, image: np.ndarray) -> np.ndarray:
        """(C, H', W') activations for a [0, 1] grayscale image."""
        tensor = self._preprocess(image)
        self._captured = None
        torch.set_num_threads(1)  # keeps reductions bit-deterministic
        with torch.no_grad():
            try:
                self.model(tensor)
            except _StopForward:
                pass
        if self._captured is None:
            raise ExportError(f"module {self.spec.module!r} produced no output")
        out = self._captured[0].numpy()
        if out.shape[0] != self.spec.channels:
            raise ExportError(
                f"layer {self.spec.layer!r} produced {out.shape[0]} channels, "
                f"expected {self.spec.channels}"
            )
        return out.astype(self.spec.dtype)

    def _preprocess(self, image: np.ndarray) -> torch.Tensor:
        arr = torch.from_numpy(np.asarray(image, dtype=np.float32))
        if arr.ndim != 2:
            raise ExportError("expected a 2-D grayscale array")
        if self.spec.resize.startswith("shorter:"):
            target = int(self.spec.resize.split(":", 1)[1])
            h, w = arr.shape
            scale = target / min(h, w)
            new_hw = (max(1, round(h * scale)), max(1, round(w * scale)))
            arr = torch.nn.functional.interpolate(
                arr[None, None], size=new_hw, mode="bilinear", align_corners=False
            )[0, 0]
        elif self.spec.resize != "none":
            raise ExportError(f"unknown resize policy {self.spec.resize!r}")
        rgb = arr[None].repeat(3, 1, 1)
        mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
        return ((rgb - mean) / std)[None]

    def preprocessing_description(self) -> dict:
        return {
            "input": "8-bit grayscale scaled to [0,1]",
            "resize": self.spec.resize,
            "channel_replication": "gray -> RGB",
            "normalization": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
        }


def read_gray_image(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            raise ExportError(f"{Path(path).name}: expected 8-bit grayscale, got {img.mode!r}")
        return np.asarray(img, dtype=np.float32) / 255.0


def export(manifest_path, spec: ExportSpec, weights_path, out_dir,
           out_manifest=None, log=None) -> int:
    """Export every manifest image; returns the number of failures.

    Output tensors land in ``out_dir`` in manifest order, the rewritten
    manifest points at them, and ``export_metadata.json`` records the
    spec and preprocessing.  Per-item failures are logged and counted;
    surviving items are still exported.
    """
    if log is None:
        log = sys.stderr
    manifest_path = Path(manifest_path)
    records = json.loads(manifest_path.read_text())
    if not isinstance(records, list) or not records:
        raise ExportError("manifest must be a nonempty JSON array")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extractor = ActivationExtractor(spec, weights_path)

    failures = 0
    new_records = []
    for rec in records:
        try:
            src = Path(rec["path"])
            if not src.is_absolute():
                src = manifest_path.parent / src
            activation = extractor.activations(read_gray_image(src))
            rel = f"{rec['id']}.xct"
            write_tensor(out_dir / rel, activation)
            new_rec = dict(rec)
            new_rec["path"] = rel
            new_records.append(new_rec)
        except (ExportError, OSError, KeyError) as exc:
            failures += 1
            print(
                json.dumps({"error": type(exc).__name__, "id": rec.get("id"),
                            "message": str(exc)}),
                file=log,
            )
    manifest_out = Path(out_manifest) if out_manifest else out_dir / "manifest.json"
    manifest_out.write_text(json.dumps(new_records, indent=1, sort_keys=True))
    (out_dir / "export_metadata.json").write_text(
        json.dumps(
            {
                "backbone": spec.backbone,
                "layer": spec.layer,
                "module": spec.module,
                "channels": spec.channels,
                "dtype": spec.dtype,
                "preprocessing": extractor.preprocessing_description(),
                "torch_version": torch.__version__,
            },
            indent=1,
            sort_keys=True,
        )
    )
    return failures
