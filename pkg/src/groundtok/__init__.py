"""Localized visual tokenization toolkit.

A desk-scale pipeline that turns an image into global image tokens plus
box-anchored region tokens, renders and parses the grounded markup that
ties text spans to those regions, and evaluates multi-box grounding
predictions under the ANY / MERGED-BOXES / AS-MANY recall protocols.
Everything is deterministic: all randomness flows from explicit seeds
through a named generator.
"""

__version__ = "0.1.0"

from .geometry import BoundingBox, ScoredBox, SizeBucket, enclosing_box, iou, nms, size_bucket
from .rng import GENERATOR_ID, derive_seed, make_rng

__all__ = [
    "BoundingBox",
    "ScoredBox",
    "SizeBucket",
    "iou",
    "enclosing_box",
    "nms",
    "size_bucket",
    "GENERATOR_ID",
    "derive_seed",
    "make_rng",
    "__version__",
]
