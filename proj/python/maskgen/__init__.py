"""Python bindings for the maskgen C++ core."""

from ._core import (
    Codebook,
    RuntimeFailure,
    Segmenter,
    ValidationError,
    ahd,
    c_iou,
    generate_sample,
    iou,
    mask_ahd,
)

__all__ = [
    "Codebook",
    "RuntimeFailure",
    "Segmenter",
    "ValidationError",
    "ahd",
    "c_iou",
    "generate_sample",
    "iou",
    "mask_ahd",
]
