"""Axis-aligned boxes, overlap geometry and batch area normalisation.

Boxes are ``(x, y, w, h)`` in pixels with ``(x, y)`` the top-left corner.
Scalar helpers work on :class:`Box`; the ``*_array`` helpers work on
``(n, 4)`` float arrays and are what the loss and harness code uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidBatchError
from .kernels import pairwise_iou, paired_iou_grad


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidArgumentError(f"box {name}={v!r} is not finite")
        if not (self.w > 0 and self.h > 0):
            raise InvalidArgumentError(f"box needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    def area(self) -> float:
        return self.w * self.h

    def size(self) -> float:
        """Square-root-of-area object size."""
        return math.sqrt(self.w * self.h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class MatchedPair:
    gt: Box
    pred: Box


def _overlap(a: float, wa: float, b: float, wb: float) -> float:
    # same value as min(a_end, b_end) - max(a, b), but exact when one
    # interval contains the other or the starts coincide
    return max(0.0, min(wa, wb, (a - b) + wa, (b - a) + wb))


def intersection_area(a: Box, b: Box) -> float:
    return _overlap(a.x, a.w, b.x, b.w) * _overlap(a.y, a.h, b.y, b.h)


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    return inter / (a.area() + b.area() - inter)


def normalized_areas(gts: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Min-max normalised ground-truth areas in [0, 1].

    A batch whose areas are all equal maps to 0.5 everywhere.
    """
    areas = _areas(gts)
    lo = areas.min()
    hi = areas.max()
    if hi == lo:
        return np.full_like(areas, 0.5)
    return (areas - lo) / (hi - lo)


def axis_shift_iou(side: float, shift: float) -> float:
    """IoU between a square of ``side`` and its copy moved ``shift`` along one axis."""
    if side <= 0:
        raise InvalidArgumentError(f"side must be positive, got {side}")
    if shift < 0:
        raise InvalidArgumentError(f"shift must be non-negative, got {shift}")
    if shift > side:
        return 0.0
    return (side - shift) / (side + shift)


def _areas(gts) -> np.ndarray:
    if isinstance(gts, np.ndarray):
        arr = gts.reshape(-1, 4)
        if arr.shape[0] == 0:
            raise InvalidBatchError("empty ground-truth batch")
        return arr[:, 2] * arr[:, 3]
    areas = np.array([b.area() for b in gts], dtype=np.float64)
    if areas.size == 0:
        raise InvalidBatchError("empty ground-truth batch")
    return areas


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    out = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return out.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]


def pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    """``(gt, pred)`` arrays from a sequence of :class:`MatchedPair`.

    A ``(gt_array, pred_array)`` tuple is passed through after validation,
    so array-level callers skip the object round trip.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        gt = np.asarray(pairs[0], dtype=np.float64).reshape(-1, 4)
        pred = np.asarray(pairs[1], dtype=np.float64).reshape(-1, 4)
        if gt.shape != pred.shape:
            raise InvalidBatchError(f"gt/pred shape mismatch {gt.shape} vs {pred.shape}")
    else:
        pairs = list(pairs)
        gt = boxes_to_array(p.gt for p in pairs)
        pred = boxes_to_array(p.pred for p in pairs)
    if gt.shape[0] == 0:
        raise InvalidBatchError("empty pair batch")
    return gt, pred


def iou_array(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(n, 4)`` arrays."""
    return paired_iou_grad(gt, pred)[0]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return pairwise_iou(a, b)
