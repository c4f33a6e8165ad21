"""Desk-scale experiments on synthetic box regression.

Scenes are sets of ground-truth boxes drawn from the tiny-object size
buckets plus jittered predictions. :func:`regress` runs plain gradient
descent directly on the predicted boxes under one of three losses and
records how the total loss is shared between objects, which is how the
rebalancing effect of the scale-adaptive weight is measured.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxgeom import axis_shift_iou
from .errors import ConfigError, DivergenceError, InvalidArgumentError
from .evaluator import BUCKET_BOUNDARIES, BUCKET_NAMES, _bucket_of_size
from .kernels import paired_iou_grad
from .losses import LossConfig, l1_gradient, sfl_weights

VARIANTS = ("plain", "sfl", "l1_sfl")
DEFAULT_BETAS = (1.0, 1.0 / math.log(2.0), 2.0 / math.log(2.0))
DEFAULT_LR = 0.05
DEFAULT_STEPS = 200
DEFAULT_SEED = 20240601


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene description.

    ``jitter="axis"`` moves every prediction along one random axis by
    ``translation`` times the box side on that axis, which gives every object
    the same initial IoU ``(1 - t) / (1 + t)``. ``jitter="random"`` shifts
    both axes by up to ``translation`` of the side and rescales each side by
    up to ``scale``; it resamples until the prediction overlaps its target.
    """

    extent: float = 512.0
    counts: tuple = (8, 8, 8, 8)
    size_ranges: tuple = ((2.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, 64.0))
    aspect_range: tuple = (0.5, 2.0)
    translation: float = 0.3
    scale: float = 0.0
    jitter: str = "axis"
    seed: int = DEFAULT_SEED
    max_retries: int = 100

    def __post_init__(self):
        if len(self.counts) != len(self.size_ranges):
            raise ConfigError("need one object count per size range")
        if any(c < 0 for c in self.counts) or sum(self.counts) < 1:
            raise ConfigError(f"object counts must be >= 0 with at least one object, got {self.counts}")
        for lo, hi in self.size_ranges:
            if not 0 < lo <= hi:
                raise ConfigError(f"bad size range ({lo}, {hi})")
        if not 0.0 <= self.translation < 1.0 or not 0.0 <= self.scale < 1.0:
            raise ConfigError("jitter fractions must lie in [0, 1)")
        if self.jitter not in ("axis", "random"):
            raise ConfigError(f"unknown jitter model {self.jitter!r}")
        a_lo, a_hi = self.aspect_range
        if not 0 < a_lo <= a_hi:
            raise ConfigError(f"bad aspect range {self.aspect_range}")


def gen_scene(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ground truths and jittered predictions as ``(n, 4)`` arrays."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    a_lo, a_hi = cfg.aspect_range
    gts = []
    preds = []
    for count, (lo, hi) in zip(cfg.counts, cfg.size_ranges):
        for _ in range(count):
            size = rng.uniform(lo, hi) if hi > lo else lo
            aspect = math.exp(rng.uniform(math.log(a_lo), math.log(a_hi))) if a_hi > a_lo else a_lo
            w = size * math.sqrt(aspect)
            h = size / math.sqrt(aspect)
            if w > cfg.extent or h > cfg.extent:
                raise ConfigError(f"object {w:.1f}x{h:.1f} does not fit in extent {cfg.extent}")
            x = rng.uniform(0.0, cfg.extent - w)
            y = rng.uniform(0.0, cfg.extent - h)
            gt = (x, y, w, h)
            gts.append(gt)
            preds.append(_jitter(gt, cfg, rng))
    return np.array(gts, dtype=np.float64), np.array(preds, dtype=np.float64)


def _jitter(gt, cfg, rng):
    x, y, w, h = gt
    if cfg.jitter == "axis":
        axis = int(rng.integers(2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if axis == 0:
            return (x + sign * cfg.translation * w, y, w, h)
        return (x, y + sign * cfg.translation * h, w, h)
    cx, cy = x + w / 2, y + h / 2
    for _ in range(cfg.max_retries):
        dx, dy = rng.uniform(-cfg.translation, cfg.translation, size=2) * (w, h)
        sw, sh = 1.0 + rng.uniform(-cfg.scale, cfg.scale, size=2)
        pw, ph = w * sw, h * sh
        pred = (cx + dx - pw / 2, cy + dy - ph / 2, pw, ph)
        if paired_iou_grad(np.array([gt]), np.array([pred]))[0][0] > 0.0:
            return pred
    raise ConfigError(f"could not place an overlapping prediction in {cfg.max_retries} tries")


def bucket_labels(gts: np.ndarray) -> list:
    sizes = np.sqrt(gts[:, 2] * gts[:, 3])
    return [_bucket_of_size(s, BUCKET_BOUNDARIES, BUCKET_NAMES) for s in sizes]


@dataclass
class RegressionTrace:
    variant: str
    gts: np.ndarray
    initial_preds: np.ndarray
    final_preds: np.ndarray
    losses: np.ndarray  # (steps,)
    shares: np.ndarray  # (steps, n)
    grad_norms: np.ndarray  # (steps, n)
    ious: np.ndarray  # (steps, n)
    final_ious: np.ndarray
    final_bucket_iou: dict
    failed_step: int | None = None
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed_step is None

    @property
    def steps_run(self) -> int:
        return len(self.losses)


def object_losses(gts, preds, variant, cfg: LossConfig):
    """Per-object losses and their gradients w.r.t. ``(x, y, w, h)``."""
    iou, diou = paired_iou_grad(gts, preds)
    plain = 1.0 - iou * iou
    plain_grad = (-2.0 * iou)[:, None] * diou
    if variant == "plain":
        return plain, plain_grad, iou
    w = sfl_weights((gts, preds), cfg.beta)
    terms = w * plain
    grad = w[:, None] * plain_grad
    if variant == "sfl":
        return terms, grad, iou
    n = gts.shape[0]
    l1 = np.abs(preds - gts).sum(axis=1) / n
    return l1 + cfg.alpha * terms, l1_gradient((gts, preds)) + cfg.alpha * grad, iou


def regress(
    gts,
    preds,
    variant: str = "sfl",
    cfg: LossConfig = LossConfig(),
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
) -> RegressionTrace:
    """Gradient descent on the predicted boxes; ``w``/``h`` move in log space.

    Stops early once every object's gradient is exactly zero. A non-finite
    loss stops the run and sets ``failed_step``.
    """
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    if not lr > 0:
        raise InvalidArgumentError(f"learning rate must be > 0, got {lr}")
    gts = np.array(gts, dtype=np.float64).reshape(-1, 4)
    start = np.array(preds, dtype=np.float64).reshape(-1, 4)
    if gts.shape != start.shape or gts.shape[0] == 0:
        raise InvalidArgumentError(f"need matching non-empty gt/pred arrays, got {gts.shape} and {start.shape}")
    n = gts.shape[0]

    pred = start.copy()
    theta = start.copy()
    theta[:, 2:] = np.log(theta[:, 2:])
    losses, shares, norms, ious = [], [], [], []
    failed = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(steps):
            terms, grad, iou = object_losses(gts, pred, variant, cfg)
            total = float(sum(terms.tolist()))
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                failed = k
                break
            losses.append(total)
            shares.append(terms / total if total > 0 else np.full(n, 1.0 / n))
            gnorm = np.sqrt((grad * grad).sum(axis=1))
            norms.append(gnorm)
            ious.append(iou)
            if not np.any(gnorm):
                break
            theta[:, :2] -= lr * grad[:, :2]
            theta[:, 2:] -= lr * grad[:, 2:] * pred[:, 2:]
            pred = theta.copy()
            pred[:, 2:] = np.exp(theta[:, 2:])

    final_iou = paired_iou_grad(gts, pred)[0] if failed is None else np.full(n, np.nan)
    labels = bucket_labels(gts)
    bucket_iou = {}
    for name in BUCKET_NAMES:
        sel = [i for i, b in enumerate(labels) if b == name]
        bucket_iou[name] = float(np.mean(final_iou[sel])) if sel else None
    return RegressionTrace(
        variant=variant,
        gts=gts,
        initial_preds=start,
        final_preds=pred,
        losses=np.array(losses),
        shares=np.array(shares).reshape(-1, n),
        grad_norms=np.array(norms).reshape(-1, n),
        ious=np.array(ious).reshape(-1, n),
        final_ious=final_iou,
        final_bucket_iou=bucket_iou,
        failed_step=failed,
        config={"variant": variant, "alpha": cfg.alpha, "beta": cfg.beta, "lr": lr, "steps": steps},
    )


@dataclass
class ShareReport:
    rows: list  # one dict per area tercile, smallest first
    distinct_areas: bool

    @property
    def rebalanced(self) -> bool:
        """Smallest tercile holds a strictly larger loss share under SFL."""
        r = self.rows[0]
        return r["share_sfl"] > r["share_plain"]

    HEADER = ("tercile", "count", "area_min", "area_max", "share_plain", "share_sfl", "grad_plain", "grad_sfl")

    def table_rows(self):
        return [tuple(r[k] for k in self.HEADER) for r in self.rows]


def loss_share_report(plain: RegressionTrace, sfl: RegressionTrace) -> ShareReport:
    """Initial loss share and mean gradient norm per ground-truth area tercile."""
    if not (np.array_equal(plain.gts, sfl.gts) and np.array_equal(plain.initial_preds, sfl.initial_preds)):
        raise InvalidArgumentError("traces come from different scenes")
    if plain.steps_run == 0 or sfl.steps_run == 0:
        raise InvalidArgumentError("trace has no recorded steps")
    areas = plain.gts[:, 2] * plain.gts[:, 3]
    order = np.argsort(areas, kind="stable")
    rows = []
    for t, idx in enumerate(np.array_split(order, 3), start=1):
        if idx.size == 0:
            rows.append(dict(tercile=t, count=0, area_min=None, area_max=None, share_plain=0.0,
                             share_sfl=0.0, grad_plain=None, grad_sfl=None))
            continue
        rows.append(
            dict(
                tercile=t,
                count=int(idx.size),
                area_min=float(areas[idx].min()),
                area_max=float(areas[idx].max()),
                share_plain=float(plain.shares[0, idx].sum()),
                share_sfl=float(sfl.shares[0, idx].sum()),
                grad_plain=float(plain.grad_norms[0, idx].mean()),
                grad_sfl=float(sfl.grad_norms[0, idx].mean()),
            )
        )
    return ShareReport(rows=rows, distinct_areas=bool(areas.max() > areas.min()))


def iou_decay_curve(sides, shifts) -> list[tuple[float, float, float, float]]:
    """``(side, shift, IoU, 1 - IoU**2)`` for a square moved along one axis.

    Shifts larger than the side give IoU 0.
    """
    rows = []
    for side in sides:
        for shift in shifts:
            v = axis_shift_iou(float(side), float(shift))
            rows.append((float(side), float(shift), v, 1.0 - v * v))
    return rows


SWEEP_HEADER = ("beta",) + tuple(f"iou_{name}" for name in BUCKET_NAMES)


def beta_sweep(
    scene_cfg: SceneConfig,
    betas=DEFAULT_BETAS,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
    alpha: float = 1.0,
) -> list[tuple]:
    """Final per-bucket mean IoU after SFL regression, one row per beta."""
    betas = [float(b) for b in betas]
    if not betas:
        raise InvalidArgumentError("need at least one beta")
    gts, preds = gen_scene(scene_cfg)
    rows = []
    for b in betas:
        trace = regress(gts, preds, "sfl", LossConfig(alpha=alpha, beta=b), steps, lr)
        if not trace.ok:
            raise DivergenceError(f"regression diverged for beta={b}", trace.failed_step)
        rows.append((b,) + tuple(trace.final_bucket_iou[name] for name in BUCKET_NAMES))
    return rows


def scene_config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
