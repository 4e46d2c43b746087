"""Embedding exporter: frozen pre-trained encoders in, PCF1 files out.

Feeds the fusion engine: each raw claim/document pair (text plus image on
both sides) is run through a frozen text transformer and a frozen vision
transformer, and the token-level hidden states are written in the engine's
binary dataset format.
"""
from .encoders import EncoderStack, load_encoders
from .export import ExportResult, export_manifest
from .manifest import ManifestError, ManifestRow, read_manifest
from .pcf1 import CLASS_NAMES, DatasetWriter
from .preprocess import ImageDecodeError, preprocess_image

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DatasetWriter",
    "EncoderStack",
    "ExportResult",
    "ImageDecodeError",
    "ManifestError",
    "ManifestRow",
    "export_manifest",
    "load_encoders",
    "preprocess_image",
    "read_manifest",
]
