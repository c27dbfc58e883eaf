from .export import ActivationExtractor, ExportError, ExportSpec, export, load_layer_config
from .tensorfile import encode, write

__all__ = [
    "ActivationExtractor",
    "ExportError",
    "ExportSpec",
    "encode",
    "export",
    "load_layer_config",
    "write",
]
