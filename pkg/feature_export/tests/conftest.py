import pytest
import torch

from feature_export.export import _build_backbone

# Layers needed per tapped module; saving only these keeps the weight
# fixtures small (the exporter loads with strict=False and the forward
# pass stops at the tap).
_PREFIXES = {
    "resnet50-layer1": ("conv1.", "bn1.", "layer1.0.", "layer1.1."),
    "resnet50-layer3": ("conv1.", "bn1.", "layer1.", "layer2.", "layer3.0.",
                        "layer3.1.", "layer3.2."),
    "googlenet": ("conv1.", "conv2.", "conv3."),
    "vgg16": ("features.0.", "features.2.", "features.5.", "features.7.",
              "features.10.", "features.12."),
}


def _truncated_state(model, prefixes):
    return {
        k: v for k, v in model.state_dict().items()
        if any(k.startswith(p) for p in prefixes)
    }


@pytest.fixture(scope="session")
def weights_dir(tmp_path_factory):
    """Random-weight backbone state dicts, truncated to the tapped layers."""
    out = tmp_path_factory.mktemp("weights")
    torch.manual_seed(0)
    resnet = _build_backbone("resnet50")
    torch.save(_truncated_state(resnet, _PREFIXES["resnet50-layer1"]), out / "res2bx.pth")
    torch.save(_truncated_state(resnet, _PREFIXES["resnet50-layer3"]), out / "res4cx.pth")
    torch.save(
        _truncated_state(_build_backbone("googlenet"), _PREFIXES["googlenet"]),
        out / "conv2x.pth",
    )
    torch.save(
        _truncated_state(_build_backbone("vgg16"), _PREFIXES["vgg16"]),
        out / "x12.pth",
    )
    return out
