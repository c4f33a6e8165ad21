"""Multi-task detection loss with the scale-adaptive IoU term.

The position loss is ``l1 + alpha * sfl`` where

    sfl = sum_i beta * ln(2 - s_i) * (1 - IoU_i**2)

and ``s_i`` is the min-max normalised ground-truth area of pair ``i``
within the supplied batch. Small objects get weight up to ``beta * ln 2``,
the largest object in the batch gets weight 0.

Gradients are taken with respect to the predicted box ``(x, y, w, h)``;
``s_i`` depends only on ground truths and is constant under them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .boxgeom import normalized_areas, pairs_to_arrays
from .errors import InvalidArgumentError, InvalidBatchError
from .kernels import paired_iou_grad

DEFAULT_BETA = 2.0 / math.log(2.0)
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise InvalidArgumentError(f"alpha must be >= 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise InvalidArgumentError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    obj: float
    l1: float
    sfl: float
    pos: float
    total: float
    alpha: float = DEFAULT_ALPHA


@dataclass(frozen=True)
class BoxGradient:
    d_x: float
    d_y: float
    d_w: float
    d_h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_x, self.d_y, self.d_w, self.d_h])


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------


def bce(logit: float, target: float) -> float:
    """Binary cross-entropy of ``sigmoid(logit)`` against ``target``."""
    if not 0.0 <= target <= 1.0:
        raise InvalidArgumentError(f"target must lie in [0, 1], got {target}")
    # max(z, 0) - z*t + log(1 + exp(-|z|)) == -[t log s(z) + (1-t) log(1-s(z))]
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def bce_mean(logits, targets) -> float:
    """Mean binary cross-entropy over matching arrays of logits and targets."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if z.shape != t.shape:
        raise InvalidArgumentError(f"logits {z.shape} and targets {t.shape} differ in shape")
    if z.size == 0:
        raise InvalidBatchError("empty cross-entropy batch")
    if np.any((t < 0) | (t > 1)):
        raise InvalidArgumentError("targets must lie in [0, 1]")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


# ---------------------------------------------------------------------------
# position losses
# ---------------------------------------------------------------------------


def l1_loss(pairs) -> float:
    """Sum over the four coordinate channels of the mean absolute error."""
    gt, pred = pairs_to_arrays(pairs)
    return float(np.abs(pred - gt).mean(axis=0).sum())


def l1_gradient(pairs) -> np.ndarray:
    """d l1_loss / d pred, shape ``(n, 4)``; ``sign(0)`` is taken as 0."""
    gt, pred = pairs_to_arrays(pairs)
    return np.sign(pred - gt) / gt.shape[0]


def sfl_weights(pairs, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Per-object factor ``beta * ln(2 - s_i)``."""
    if not beta > 0:
        raise InvalidArgumentError(f"beta must be > 0, got {beta}")
    gt, _ = pairs_to_arrays(pairs)
    return beta * np.log(2.0 - normalized_areas(gt))


def sfl_terms(pairs, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Per-object summands of the scale-adaptive loss."""
    gt, pred = pairs_to_arrays(pairs)
    iou, _ = paired_iou_grad(gt, pred)
    return sfl_weights((gt, pred), beta) * (1.0 - iou * iou)


def sfl(pairs, beta: float = DEFAULT_BETA) -> float:
    return float(sum(sfl_terms(pairs, beta).tolist()))


def sfl_gradients(pairs, beta: float = DEFAULT_BETA) -> np.ndarray:
    """d sfl / d pred for every pair, shape ``(n, 4)``."""
    gt, pred = pairs_to_arrays(pairs)
    iou, diou = paired_iou_grad(gt, pred)
    w = sfl_weights((gt, pred), beta)
    return (w * -2.0 * iou)[:, None] * diou


def sfl_gradient(pairs, beta: float, index: int) -> BoxGradient:
    gt, pred = pairs_to_arrays(pairs)
    n = gt.shape[0]
    if not (isinstance(index, (int, np.integer)) and 0 <= index < n):
        raise InvalidArgumentError(f"pair index {index!r} out of range for {n} pairs")
    g = sfl_gradients((gt, pred), beta)[index]
    return BoxGradient(*map(float, g))


def plain_iou_terms(pairs) -> np.ndarray:
    """Unweighted per-object ``1 - IoU**2``."""
    gt, pred = pairs_to_arrays(pairs)
    iou, _ = paired_iou_grad(gt, pred)
    return 1.0 - iou * iou


def plain_iou_gradients(pairs) -> np.ndarray:
    gt, pred = pairs_to_arrays(pairs)
    iou, diou = paired_iou_grad(gt, pred)
    return (-2.0 * iou)[:, None] * diou


def position_loss(pairs, cfg: LossConfig = LossConfig()) -> tuple[float, dict]:
    """``l1 + alpha * sfl``; returns ``(pos, {"l1": ..., "sfl": ...})``."""
    arrays = pairs_to_arrays(pairs)
    l1 = l1_loss(arrays)
    s = sfl(arrays, cfg.beta)
    return l1 + cfg.alpha * s, {"l1": l1, "sfl": s}


def total_loss(
    cls: float,
    obj: float,
    pos: float,
    *,
    l1: float | None = None,
    sfl: float | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> LossBreakdown:
    """Assemble the three task losses.

    ``l1``/``sfl`` fill in the position-loss parts when known; without
    them the whole position loss is reported under ``l1``.
    """
    for name, v in (("cls", cls), ("obj", obj), ("pos", pos)):
        if not math.isfinite(v) or v < 0:
            raise InvalidArgumentError(f"{name} loss must be finite and >= 0, got {v}")
    if l1 is None and sfl is None:
        l1, sfl = pos, 0.0
    elif l1 is None or sfl is None:
        raise InvalidArgumentError("pass both l1 and sfl or neither")
    return LossBreakdown(cls=cls, obj=obj, l1=l1, sfl=sfl, pos=pos, total=cls + obj + pos, alpha=alpha)


def detection_loss(
    pairs,
    cfg: LossConfig = LossConfig(),
    cls_logits=None,
    cls_targets=None,
    obj_logits=None,
    obj_targets=None,
) -> LossBreakdown:
    """Full multi-task loss; missing logit arrays contribute 0."""
    pos, parts = position_loss(pairs, cfg)
    cls = bce_mean(cls_logits, cls_targets) if cls_logits is not None else 0.0
    obj = bce_mean(obj_logits, obj_targets) if obj_logits is not None else 0.0
    return total_loss(cls, obj, pos, l1=parts["l1"], sfl=parts["sfl"], alpha=cfg.alpha)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_differences(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    if not step > 0:
        raise InvalidArgumentError(f"step must be > 0, got {step}")
    x = np.array(point, dtype=np.float64).ravel()
    out = np.empty_like(x)
    for k in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[k] += step
        lo[k] -= step
        out[k] = (f(hi) - f(lo)) / (2.0 * step)
    return out


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: Sequence[float],
    analytic: Sequence[float],
    step: float = 1e-5,
) -> float:
    """Worst elementwise relative error between ``analytic`` and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    numeric = central_differences(f, point, step)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != numeric.shape:
        raise InvalidArgumentError(f"analytic gradient has shape {analytic.shape}, expected {numeric.shape}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
