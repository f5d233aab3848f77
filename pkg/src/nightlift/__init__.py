"""Detail-preserving night-to-day translation for object detection.

Per-pixel kernel prediction (:mod:`nightlift.kpn`) trained on StyleMix
pairs (:mod:`nightlift.stylemix`) against a frozen day detector
(:mod:`nightlift.detector`).
"""
__version__ = "0.1.0"

from . import backend  # noqa: E402
from .imaging import (  # noqa: E402
    Image,
    KernelField,
    Padding,
    apply_pixelwise_filter,
    clamp_to_unit,
    filter_gradients,
    psnr,
)

__all__ = [
    "Image",
    "KernelField",
    "Padding",
    "apply_pixelwise_filter",
    "backend",
    "clamp_to_unit",
    "filter_gradients",
    "psnr",
]
