"""COCO-style box evaluation with tiny-object size buckets.

Metrics: AP over IoU thresholds 0.50:0.05:0.95, AP50, AP75, and AP restricted
to the very tiny / tiny / small / medium size buckets (object size is
``sqrt(w * h)`` in pixels, buckets ``[2, 8)``, ``[8, 16)``, ``[16, 32)``,
``[32, 64)``). Precision is interpolated at 101 recall points.

Within a bucket, ground truths outside the bucket are ignored: a detection
matched to one of them is dropped rather than counted as a false positive,
as is an unmatched detection whose own size falls outside the bucket.
Overall AP averages over thresholds per category, then over categories that
have at least one ground truth.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .boxgeom import Box
from .errors import ConfigError, IngestionError, InvalidArgumentError
from .kernels import IGNORED, TP, greedy_match, pairwise_iou

BUCKET_NAMES = ("vt", "t", "s", "m")
BUCKET_BOUNDARIES = (2.0, 8.0, 16.0, 32.0, 64.0)
COCO_IOU_THRESHOLDS = tuple(float(t) for t in np.linspace(0.5, 0.95, 10))


def size_bucket(box: Box, boundaries: Sequence[float] = BUCKET_BOUNDARIES, names: Sequence[str] = BUCKET_NAMES):
    """Bucket label for a box, or ``None`` when its size is outside every bucket.

    Intervals are half-open: ``[b_k, b_{k+1})``.
    """
    return _bucket_of_size(box.size(), boundaries, names)


def _bucket_of_size(size, boundaries, names):
    for lo, hi, name in zip(boundaries, boundaries[1:], names):
        if lo <= size < hi:
            return name
    return None


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    category_id: Hashable
    box: Box
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidArgumentError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass
class GroundTruthSet:
    images: list
    categories: dict
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        known_images = set(self.images)
        if len(known_images) != len(self.images):
            raise IngestionError("duplicate image ids in registry")
        bad = []
        for image_id, anns in self.annotations.items():
            if image_id not in known_images:
                bad.append(f"image {image_id!r}")
                continue
            for j, (cat, _) in enumerate(anns):
                if cat not in self.categories:
                    bad.append(f"image {image_id!r} annotation {j}: category {cat!r}")
        if bad:
            raise IngestionError("annotations reference unregistered ids: " + "; ".join(bad), bad)

    def boxes(self, image_id, category_id) -> list[Box]:
        return [b for c, b in self.annotations.get(image_id, ()) if c == category_id]

    def count(self) -> int:
        return sum(len(v) for v in self.annotations.values())


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = COCO_IOU_THRESHOLDS
    recall_points: int = 101
    max_dets_per_image: int = 100
    size_boundaries: tuple = BUCKET_BOUNDARIES
    bucket_names: tuple = BUCKET_NAMES

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr or any(not 0.0 < t <= 1.0 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ConfigError(f"IoU thresholds must be strictly increasing in (0, 1], got {thr}")
        object.__setattr__(self, "iou_thresholds", thr)
        if self.recall_points < 2:
            raise ConfigError(f"need at least 2 recall points, got {self.recall_points}")
        if self.max_dets_per_image < 1:
            raise ConfigError(f"max_dets_per_image must be >= 1, got {self.max_dets_per_image}")
        bnd = tuple(float(b) for b in self.size_boundaries)
        if any(b <= a for a, b in zip(bnd, bnd[1:])):
            raise ConfigError(f"bucket boundaries must be strictly increasing, got {bnd}")
        if len(self.bucket_names) != len(bnd) - 1:
            raise ConfigError("need exactly one bucket name per interval")
        object.__setattr__(self, "size_boundaries", bnd)


@dataclass
class EvalReport:
    ap: float | None
    ap50: float | None
    ap75: float | None
    buckets: dict  # bucket name -> AP or None
    per_category: dict  # category id -> AP or None

    @property
    def ap_vt(self):
        return self.buckets.get("vt")

    @property
    def ap_t(self):
        return self.buckets.get("t")

    @property
    def ap_s(self):
        return self.buckets.get("s")

    @property
    def ap_m(self):
        return self.buckets.get("m")

    def metrics(self) -> dict:
        out = {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75}
        for name, v in self.buckets.items():
            out[f"ap_{name}"] = v
        return out


def average_precision(tp_flags: Sequence[bool], total_gt: int, recall_points: int = 101) -> float:
    """Interpolated AP of a score-sorted TP/FP sequence.

    Precision is replaced by its running maximum from the right and sampled
    at ``recall_points`` evenly spaced recalls in [0, 1]. Returns 0 when
    ``total_gt`` is 0.
    """
    if total_gt < 0:
        raise InvalidArgumentError(f"total_gt must be >= 0, got {total_gt}")
    flags = np.asarray(tp_flags, dtype=bool)
    if total_gt == 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, recall_points), side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


def match_detections(dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float) -> list[bool]:
    """TP flags for one image and category; ``dets`` must be score-sorted."""
    ious = pairwise_iou([d.box.as_tuple() for d in dets], [g.as_tuple() for g in gts])
    state = greedy_match(
        ious,
        np.zeros(len(gts), dtype=bool),
        np.zeros(len(dets), dtype=bool),
        np.array([iou_threshold]),
    )
    return [bool(s == TP) for s in state[0]]


def _check_references(gts: GroundTruthSet, dets: Iterable[Detection]):
    images = set(gts.images)
    bad = []
    for i, d in enumerate(dets):
        problems = []
        if d.image_id not in images:
            problems.append(f"unknown image_id {d.image_id!r}")
        if d.category_id not in gts.categories:
            problems.append(f"unknown category_id {d.category_id!r}")
        if problems:
            bad.append(f"detection[{i}]: " + ", ".join(problems))
    if bad:
        raise IngestionError(f"{len(bad)} detection(s) reference unknown ids: " + "; ".join(bad[:20]), bad)


def _truncate(dets: Sequence[Detection], max_dets: int) -> dict:
    """Per image, keep the ``max_dets`` highest scores (stable on ties)."""
    by_image = defaultdict(list)
    for d in dets:
        by_image[d.image_id].append(d)
    out = {}
    for image_id, items in by_image.items():
        items = sorted(items, key=lambda d: -d.score)
        out[image_id] = items[:max_dets]
    return out


def evaluate(gts: GroundTruthSet, dets: Sequence[Detection], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    dets = list(dets)
    _check_references(gts, dets)
    kept = _truncate(dets, cfg.max_dets_per_image)

    # thresholds evaluated: configured ones plus the fixed AP50/AP75 points
    extra = [t for t in (0.5, 0.75) if not any(math.isclose(t, c) for c in cfg.iou_thresholds)]
    thresholds = np.array(sorted(cfg.iou_thresholds + tuple(extra)))
    main_idx = [i for i, t in enumerate(thresholds) if any(math.isclose(t, c) for c in cfg.iou_thresholds)]
    i50 = int(np.argmin(np.abs(thresholds - 0.5)))
    i75 = int(np.argmin(np.abs(thresholds - 0.75)))

    ranges = [None] + list(cfg.bucket_names)
    # (range, category) -> list of per-image blocks of (scores, states)
    blocks = defaultdict(list)
    npig = defaultdict(int)

    for image_id in gts.images:
        img_dets = kept.get(image_id, [])
        for cat in gts.categories:
            g_boxes = gts.boxes(image_id, cat)
            d_list = [d for d in img_dets if d.category_id == cat]
            if not g_boxes and not d_list:
                continue
            g_arr = np.array([b.as_tuple() for b in g_boxes], dtype=np.float64).reshape(-1, 4)
            d_arr = np.array([d.box.as_tuple() for d in d_list], dtype=np.float64).reshape(-1, 4)
            scores = np.array([d.score for d in d_list], dtype=np.float64)
            ious = pairwise_iou(d_arr, g_arr)
            g_size = np.sqrt(g_arr[:, 2] * g_arr[:, 3])
            d_size = np.sqrt(d_arr[:, 2] * d_arr[:, 3])
            for rng in ranges:
                if rng is None:
                    g_ign = np.zeros(len(g_boxes), dtype=bool)
                    d_ign = np.zeros(len(d_list), dtype=bool)
                else:
                    g_ign = np.array([_bucket_of_size(s, cfg.size_boundaries, cfg.bucket_names) != rng for s in g_size], dtype=bool)
                    d_ign = np.array([_bucket_of_size(s, cfg.size_boundaries, cfg.bucket_names) != rng for s in d_size], dtype=bool)
                npig[rng, cat] += int((~g_ign).sum())
                if d_list:
                    state = greedy_match(ious, g_ign, d_ign, thresholds)
                    blocks[rng, cat].append((scores, state))

    def ap_table(rng):
        """category -> per-threshold AP array, for categories with ground truths."""
        out = {}
        for cat in gts.categories:
            n = npig[rng, cat]
            if n == 0:
                continue
            parts = blocks.get((rng, cat), [])
            if parts:
                scores = np.concatenate([p[0] for p in parts])
                states = np.concatenate([p[1] for p in parts], axis=1)
                order = np.argsort(-scores, kind="mergesort")
                states = states[:, order]
            else:
                states = np.zeros((len(thresholds), 0), dtype=np.int8)
            aps = np.empty(len(thresholds))
            for t in range(len(thresholds)):
                row = states[t]
                row = row[row != IGNORED]
                aps[t] = average_precision(row == TP, n, cfg.recall_points)
            out[cat] = aps
        return out

    def summarize(table, idx):
        if not table:
            return None
        return float(np.mean([table[c][idx].mean() for c in table]))

    overall = ap_table(None)
    buckets = {name: summarize(ap_table(name), main_idx) for name in cfg.bucket_names}
    per_category = {cat: (float(overall[cat][main_idx].mean()) if cat in overall else None) for cat in gts.categories}
    return EvalReport(
        ap=summarize(overall, main_idx),
        ap50=summarize(overall, [i50]),
        ap75=summarize(overall, [i75]),
        buckets=buckets,
        per_category=per_category,
    )


# ---------------------------------------------------------------------------
# COCO-format ingestion
# ---------------------------------------------------------------------------


def _read_json(source, what):
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as e:
            raise IngestionError(f"cannot read {what} file {path}: {e.strerror}", [str(path)]) from e
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            loc = f"{path}:{e.lineno}:{e.colno}"
            raise IngestionError(f"malformed JSON in {what} file at {loc}: {e.msg}", [loc]) from e
    return source


def _parse_bbox(raw, where):
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise IngestionError(f"{where}: bbox must be a list of 4 numbers, got {raw!r}", [where])
    try:
        return Box(*(float(v) for v in raw))
    except (TypeError, ValueError) as e:
        raise IngestionError(f"{where}: invalid bbox {raw!r}: {e}", [where]) from e


def _require(rec, keys, where):
    if not isinstance(rec, Mapping):
        raise IngestionError(f"{where}: expected an object, got {type(rec).__name__}", [where])
    missing = [k for k in keys if k not in rec]
    if missing:
        raise IngestionError(f"{where}: missing field(s) {', '.join(missing)}", [where])


def load_coco_gt(source) -> GroundTruthSet:
    """Ground truths from a COCO annotation file (path) or already-parsed dict."""
    data = _read_json(source, "annotation")
    if not isinstance(data, Mapping):
        raise IngestionError("annotation file must hold a JSON object", ["<root>"])
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise IngestionError(f"annotation file needs a '{key}' list", [key])
    images = []
    for i, rec in enumerate(data["images"]):
        _require(rec, ["id"], f"images[{i}]")
        images.append(rec["id"])
    categories = {}
    for i, rec in enumerate(data["categories"]):
        _require(rec, ["id"], f"categories[{i}]")
        categories[rec["id"]] = str(rec.get("name", rec["id"]))
    annotations = defaultdict(list)
    image_set = set(images)
    bad = []
    for i, rec in enumerate(data["annotations"]):
        where = f"annotations[{i}]"
        _require(rec, ["image_id", "category_id", "bbox"], where)
        box = _parse_bbox(rec["bbox"], where)
        if rec["image_id"] not in image_set or rec["category_id"] not in categories:
            bad.append(f"{where}: unknown image_id {rec['image_id']!r} or category_id {rec['category_id']!r}")
            continue
        annotations[rec["image_id"]].append((rec["category_id"], box))
    if bad:
        raise IngestionError("annotations reference unregistered ids: " + "; ".join(bad), bad)
    return GroundTruthSet(images=images, categories=categories, annotations=dict(annotations))


def load_coco_dets(source) -> list[Detection]:
    """Detections from a COCO results file (path) or already-parsed list."""
    data = _read_json(source, "detections")
    if not isinstance(data, list):
        raise IngestionError("detections file must hold a JSON list", ["<root>"])
    out = []
    for i, rec in enumerate(data):
        where = f"detections[{i}]"
        _require(rec, ["image_id", "category_id", "bbox", "score"], where)
        box = _parse_bbox(rec["bbox"], where)
        try:
            out.append(Detection(rec["image_id"], rec["category_id"], box, float(rec["score"])))
        except (TypeError, ValueError) as e:
            raise IngestionError(f"{where}: {e}", [where]) from e
    return out


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

_LABELS = {
    "ap": "AP @[.50:.95]",
    "ap50": "AP @.50",
    "ap75": "AP @.75",
    "ap_vt": "AP very tiny [2,8)",
    "ap_t": "AP tiny [8,16)",
    "ap_s": "AP small [16,32)",
    "ap_m": "AP medium [32,64)",
}


def report_rows(report: EvalReport, categories: Mapping | None = None) -> list[tuple[str, str]]:
    """``(metric, value)`` rows; absent metrics have an empty value."""

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    rows = [(k, fmt(v)) for k, v in report.metrics().items()]
    for cat, v in report.per_category.items():
        name = categories.get(cat, cat) if categories else cat
        rows.append((f"ap_cat_{name}", fmt(v)))
    return rows


def format_table(report: EvalReport, categories: Mapping | None = None) -> str:
    lines = []
    for key, value in report_rows(report, categories):
        label = _LABELS.get(key, key.replace("ap_cat_", "AP category "))
        lines.append(f"{label:<28} {value if value else '-':>10}")
    return "\n".join(lines)
