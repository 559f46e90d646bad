"""stainkit: stain color augmentation, normalization and analysis for H&E patches."""

from . import analysis, augment, bench, colorspace, data, errors, neuralnorm, normalize, tiling
from .colorspace import OD_MAX, default_stain_matrix

__version__ = "0.1.0"

__all__ = [
    "OD_MAX",
    "analysis",
    "augment",
    "bench",
    "colorspace",
    "data",
    "default_stain_matrix",
    "errors",
    "neuralnorm",
    "normalize",
    "tiling",
    "__version__",
]
