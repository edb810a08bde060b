"""Joint volumetric super-resolution and segmentation with domain adaptation.

The package turns low-resolution (thick-slice) cardiac-like volumes into
high-resolution grey reconstructions and multi-class segmentations with a
single twin-decoder generator, and adapts volumes from an unseen scanner
domain with a variational adversarial adaptation model. A built-in phantom
generator provides a fully synthetic, deterministic corpus for training
and evaluation.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointMismatchError,
    GenerationError,
    NumericError,
    ParseError,
    ValidationError,
    VolsrError,
)
from .volume import GreyVolume, LabelVolume, read_volume, write_volume

__all__ = [
    "CheckpointMismatchError",
    "GenerationError",
    "GreyVolume",
    "LabelVolume",
    "NumericError",
    "ParseError",
    "ValidationError",
    "VolsrError",
    "read_volume",
    "write_volume",
    "__version__",
]
