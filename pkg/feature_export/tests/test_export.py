import json

import numpy as np
import pytest
from PIL import Image

from feature_export.cli import main
from feature_export.export import (
    ActivationExtractor,
    ExportError,
    ExportSpec,
    export,
    load_layer_config,
)

from mcncc.io import load_manifest, read_tensor

PAPER_CHANNELS = {"res2bx": 256, "conv2x": 192, "res4cx": 1024, "x12": 256}


def save_gray(path, pixels):
    Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)


def write_manifest(tmp_path, entries):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


@pytest.fixture
def image_manifest(tmp_path):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(2):
        name = f"img{i}.png"
        save_gray(tmp_path / name, rng.integers(0, 256, size=(96, 96)))
        entries.append(
            {"id": f"img{i}", "role": "database", "domain_tag": "print",
             "path": name, "group_id": f"g{i}"}
        )
    return write_manifest(tmp_path, entries)


class TestLayerConfig:
    def test_pinned_channels_match_published_values(self):
        config = load_layer_config()
        for layer, channels in PAPER_CHANNELS.items():
            assert config[layer]["channels"] == channels

    def test_unknown_layer_rejected(self):
        with pytest.raises(ExportError, match="unknown layer"):
            ExportSpec.for_layer("res9zz")

    def test_missing_module_rejected(self, weights_dir):
        spec = ExportSpec(
            backbone="resnet50", layer="bogus", module="layer9.0", channels=1
        )
        with pytest.raises(ExportError, match="not found"):
            ActivationExtractor(spec, weights_dir / "res2bx.pth")


class TestActivations:
    @pytest.mark.parametrize("layer,size", [
        ("res2bx", 96), ("conv2x", 96), ("x12", 64), ("res4cx", 64),
    ])
    def test_every_configured_layer_yields_stated_channels(self, weights_dir, layer, size):
        spec = ExportSpec.for_layer(layer)
        extractor = ActivationExtractor(spec, weights_dir / f"{layer}.pth")
        rng = np.random.default_rng(1)
        out = extractor.activations(rng.random((size, size)).astype(np.float32))
        assert out.shape[0] == PAPER_CHANNELS[layer]

    def test_constant_image_has_constant_interior(self, weights_dir):
        # Shift invariance of convolutions: away from the borders, a
        # constant input produces spatially constant activations.
        spec = ExportSpec.for_layer("res2bx")
        extractor = ActivationExtractor(spec, weights_dir / "res2bx.pth")
        out = extractor.activations(np.full((128, 128), 0.5, dtype=np.float32))
        interior = out[:, 12:-12, 12:-12]
        spread = interior.max(axis=(1, 2)) - interior.min(axis=(1, 2))
        assert float(spread.max()) < 1e-4

    def test_resize_policy(self, weights_dir):
        spec = ExportSpec.for_layer("res2bx", resize="shorter:64")
        extractor = ActivationExtractor(spec, weights_dir / "res2bx.pth")
        out = extractor.activations(np.zeros((128, 256), dtype=np.float32))
        assert out.shape[1] == 16  # 64 / 4 downsampling


class TestExport:
    def test_export_round_trips_through_downstream_reader(
        self, tmp_path, image_manifest, weights_dir
    ):
        spec = ExportSpec.for_layer("res2bx")
        out_dir = tmp_path / "out"
        failures = export(image_manifest, spec, weights_dir / "res2bx.pth", out_dir)
        assert failures == 0
        manifest = load_manifest(out_dir / "manifest.json", closed_set=False)
        assert [e.item_id for e in manifest.entries] == ["img0", "img1"]  # order kept
        for entry in manifest.entries:
            fmap = read_tensor(out_dir / entry.path, domain_tag=entry.domain_tag)
            assert fmap.channels == 256
        meta = json.loads((out_dir / "export_metadata.json").read_text())
        assert meta["layer"] == "res2bx"
        assert "normalization" in meta["preprocessing"]

    def test_repeat_export_bit_identical(self, tmp_path, image_manifest, weights_dir):
        spec = ExportSpec.for_layer("res2bx")
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert export(image_manifest, spec, weights_dir / "res2bx.pth", a) == 0
        assert export(image_manifest, spec, weights_dir / "res2bx.pth", b) == 0
        for name in ("img0.xct", "img1.xct", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_failed_items_logged_and_counted(self, tmp_path, weights_dir, capsys):
        rng = np.random.default_rng(2)
        save_gray(tmp_path / "good.png", rng.integers(0, 256, size=(96, 96)))
        manifest = write_manifest(
            tmp_path,
            [
                {"id": "good", "role": "database", "domain_tag": "print",
                 "path": "good.png", "group_id": "g0"},
                {"id": "gone", "role": "database", "domain_tag": "print",
                 "path": "missing.png", "group_id": "g1"},
            ],
        )
        out_dir = tmp_path / "out"
        code = main(
            ["--manifest", str(manifest), "--layer", "res2bx",
             "--weights", str(weights_dir / "res2bx.pth"), "--out-dir", str(out_dir)]
        )
        assert code == 1  # some items failed
        err_lines = [json.loads(l) for l in capsys.readouterr().err.strip().splitlines()]
        assert any(rec.get("id") == "gone" for rec in err_lines)
        written = json.loads((out_dir / "manifest.json").read_text())
        assert [r["id"] for r in written] == ["good"]
        assert (out_dir / "good.xct").exists()

    def test_cli_success_path(self, tmp_path, image_manifest, weights_dir, capsys):
        out_dir = tmp_path / "out"
        code = main(
            ["--manifest", str(image_manifest), "--layer", "res2bx",
             "--weights", str(weights_dir / "res2bx.pth"), "--out-dir", str(out_dir)]
        )
        assert code == 0
        capsys.readouterr()
        assert (out_dir / "img0.xct").exists() and (out_dir / "img1.xct").exists()
