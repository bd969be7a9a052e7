"""Transfer an object mask from one camera view to another.

A frozen two-view encoder supplies dense features; a small trainable head
injects the source mask, fuses the views through a pooled attention
bottleneck, decodes with point prompts and iteratively refines the result.
"""

from .core import RunConfig, binarize, iou, read_mask, write_mask
from .encoder import ToyEncoder
from .head import SegmentationHead, run_head
from .prediction import sample_points
from .synthetic import generate_pairs
from .training import evaluate, train

__all__ = [
    "RunConfig",
    "SegmentationHead",
    "ToyEncoder",
    "binarize",
    "evaluate",
    "generate_pairs",
    "iou",
    "read_mask",
    "run_head",
    "sample_points",
    "train",
    "write_mask",
]
