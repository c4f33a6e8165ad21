"""Scale-adaptive box regression loss, relay attention reference and
tiny-object detection evaluation."""

__version__ = "0.1.0"

from .boxgeom import Box, MatchedPair, axis_shift_iou, intersection_area, iou, normalized_areas
from .evaluator import Detection, EvalConfig, EvalReport, GroundTruthSet, evaluate, size_bucket
from .losses import (
    BoxGradient,
    LossBreakdown,
    LossConfig,
    bce,
    finite_diff_check,
    l1_loss,
    position_loss,
    sfl,
    sfl_gradient,
    total_loss,
)

__all__ = [
    "Box",
    "MatchedPair",
    "axis_shift_iou",
    "intersection_area",
    "iou",
    "normalized_areas",
    "Detection",
    "EvalConfig",
    "EvalReport",
    "GroundTruthSet",
    "evaluate",
    "size_bucket",
    "BoxGradient",
    "LossBreakdown",
    "LossConfig",
    "bce",
    "finite_diff_check",
    "l1_loss",
    "position_loss",
    "sfl",
    "sfl_gradient",
    "total_loss",
]
