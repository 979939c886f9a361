"""LayerNorm mapping capture for vision transformers."""

from .capture import CaptureError, ExtractionManifest, LayerRecord, extract, \
    find_normalization_layers
from .models import load_model, random_batch

__version__ = "0.1.0"

__all__ = [
    "CaptureError",
    "ExtractionManifest",
    "LayerRecord",
    "extract",
    "find_normalization_layers",
    "load_model",
    "random_batch",
]
