"""Export pretrained vision-transformer patch features to .cndt containers."""

from .exporter import DEFAULT_LAYERS, ExportError, ExportJob, export_features

__all__ = ["DEFAULT_LAYERS", "ExportError", "ExportJob", "export_features"]
__version__ = "0.1.0"
