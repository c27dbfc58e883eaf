"""Command-line exporter: manifest of images -> XCT1 feature tensors."""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportError, ExportSpec, export, load_layer_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-export",
        description="Export pretrained-backbone activations to XCT1 tensors",
    )
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--layer", required=True, help="e.g. res2bx, conv2x, x12, res4cx")
    parser.add_argument("--weights", required=True, help="backbone state_dict file")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--out-manifest", default=None)
    parser.add_argument("--resize", default="none", help="none or shorter:<pixels>")
    parser.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    parser.add_argument("--layers-config", default=None, help="override layers.json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_layer_config(args.layers_config)
        spec = ExportSpec.for_layer(
            args.layer, resize=args.resize, dtype=args.dtype, config=config
        )
        failures = export(
            args.manifest, spec, args.weights, args.out_dir, args.out_manifest
        )
    except (ExportError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    if failures:
        print(json.dumps({"failed_items": failures}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
