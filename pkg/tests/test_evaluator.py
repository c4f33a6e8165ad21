import json

import numpy as np
import pytest

from scaleloss.boxgeom import Box, iou
from scaleloss.errors import ConfigError, IngestionError
from scaleloss.evaluator import (
    Detection,
    EvalConfig,
    GroundTruthSet,
    average_precision,
    evaluate,
    format_table,
    load_coco_dets,
    load_coco_gt,
    match_detections,
    report_rows,
    size_bucket,
)

from oracles import brute_force_report, random_eval_instance

METRICS = ("ap", "ap50", "ap75", "ap_vt", "ap_t", "ap_s", "ap_m")


def build(images, categories, gts, dets):
    ann = {}
    for image, cat, box in gts:
        ann.setdefault(image, []).append((cat, Box(*box)))
    gset = GroundTruthSet(images=list(images), categories={c: str(c) for c in categories}, annotations=ann)
    return gset, [Detection(i, c, Box(*b), s) for i, c, b, s in dets]


def assert_matches_oracle(images, categories, gts, dets, cfg=EvalConfig()):
    gset, dlist = build(images, categories, gts, dets)
    report = evaluate(gset, dlist, cfg)
    oracle = brute_force_report(images, categories, gts, dets, cfg.iou_thresholds, cfg.max_dets_per_image)
    got = report.metrics()
    for m in METRICS:
        if oracle[m] is None:
            assert got[m] is None, m
        else:
            assert got[m] == pytest.approx(oracle[m], abs=1e-9), m
    for c in categories:
        if oracle["per_category"][c] is None:
            assert report.per_category[c] is None
        else:
            assert report.per_category[c] == pytest.approx(oracle["per_category"][c], abs=1e-9)
    return report


class TestSizeBucket:
    @pytest.mark.parametrize("side,label", [(4, "vt"), (12, "t"), (20, "s"), (40, "m")])
    def test_examples(self, side, label):
        assert size_bucket(Box(0, 0, side, side)) == label

    @pytest.mark.parametrize(
        "side,label",
        [(2, "vt"), (8, "t"), (16, "s"), (32, "m"), (64, None), (1.99, None), (7.999, "vt")],
    )
    def test_half_open_edges(self, side, label):
        assert size_bucket(Box(0, 0, side, side)) == label

    def test_uses_sqrt_area(self):
        assert size_bucket(Box(0, 0, 2, 32)) == "t"  # sqrt(64) = 8

    def test_partition(self, rng):
        for s in rng.uniform(2, 64, 1000):
            labels = [lab for lab in ("vt", "t", "s", "m") if size_bucket(Box(0, 0, s, s)) == lab]
            assert len(labels) == 1


class TestMatching:
    gt = [Box(0, 0, 10, 10)]

    def test_single_tp(self):
        assert match_detections([Detection(1, 1, Box(0, 0, 10, 10), 0.9)], self.gt, 0.5) == [True]

    def test_single_use(self):
        dets = [Detection(1, 1, Box(0, 0, 10, 10), 0.9), Detection(1, 1, Box(0.5, 0, 10, 10), 0.8)]
        assert match_detections(dets, self.gt, 0.5) == [True, False]

    def test_disjoint(self):
        assert match_detections([Detection(1, 1, Box(50, 50, 10, 10), 0.9)], self.gt, 0.5) == [False]


class TestAveragePrecision:
    def test_one_tp(self):
        assert average_precision([True], 1) == 1.0

    def test_one_fp(self):
        assert average_precision([False], 1) == 0.0

    def test_fp_then_tp(self):
        assert average_precision([False, True], 1) == pytest.approx(0.5, abs=1e-12)

    def test_no_gt(self):
        assert average_precision([False], 0) == 0.0

    def test_partial_recall(self):
        # one TP out of two gts: precision 1 for recall <= 0.5, then nothing
        assert average_precision([True], 2) == pytest.approx(51 / 101, abs=1e-12)


class TestEvaluate:
    def test_perfect(self):
        gts = [(1, 1, (0, 0, 4, 4)), (1, 2, (20, 20, 12, 12)), (2, 1, (5, 5, 20, 20)), (2, 1, (50, 50, 40, 40))]
        dets = [(i, c, b, 1.0) for i, c, b in gts]
        report = assert_matches_oracle([1, 2], [1, 2], gts, dets)
        for m in METRICS:
            assert report.metrics()[m] == 1.0

    def test_no_detections(self):
        gts = [(1, 1, (0, 0, 4, 4)), (1, 1, (20, 20, 12, 12))]
        report = assert_matches_oracle([1], [1], gts, [])
        assert report.ap == 0.0 and report.ap_vt == 0.0 and report.ap_t == 0.0
        assert report.ap_s is None and report.ap_m is None

    def test_unknown_ids(self):
        gset, _ = build([1], [1], [(1, 1, (0, 0, 4, 4))], [])
        with pytest.raises(IngestionError) as e:
            evaluate(gset, [Detection(7, 1, Box(0, 0, 1, 1), 0.5), Detection(1, 9, Box(0, 0, 1, 1), 0.5)])
        assert len(e.value.records) == 2
        assert "detection[0]" in e.value.records[0]

    def test_ignored_detection_not_penalised(self):
        # a medium gt matched by a medium detection must not cost AP_vt anything
        gts = [(1, 1, (0, 0, 4, 4)), (1, 1, (50, 50, 40, 40))]
        dets = [(1, 1, (50, 50, 40, 40), 0.99), (1, 1, (0, 0, 4, 4), 0.5)]
        report = assert_matches_oracle([1], [1], gts, dets)
        assert report.ap_vt == 1.0

    def test_out_of_range_gt_counts_overall(self):
        gts = [(1, 1, (0, 0, 100, 100))]
        report = assert_matches_oracle([1], [1], gts, [(1, 1, (0, 0, 100, 100), 0.7)])
        assert report.ap == 1.0
        assert all(report.buckets[b] is None for b in ("vt", "t", "s", "m"))

    def test_category_without_gt_excluded(self):
        gts = [(1, 1, (0, 0, 10, 10))]
        dets = [(1, 1, (0, 0, 10, 10), 0.9), (1, 2, (30, 30, 10, 10), 0.95)]
        report = assert_matches_oracle([1], [1, 2], gts, dets)
        assert report.ap == 1.0
        assert report.per_category[2] is None

    def test_max_dets_truncation(self):
        gts = [(1, 1, (0, 0, 10, 10)), (1, 1, (40, 40, 10, 10))]
        dets = [(1, 1, (100, 100, 10, 10), 0.9), (1, 1, (0, 0, 10, 10), 0.8), (1, 1, (40, 40, 10, 10), 0.7)]
        cfg = EvalConfig(max_dets_per_image=2)
        report = assert_matches_oracle([1], [1], gts, dets, cfg)
        full = assert_matches_oracle([1], [1], gts, dets)
        assert report.ap < full.ap

    def test_random_against_oracle(self, rng):
        for _ in range(40):
            assert_matches_oracle(*random_eval_instance(rng))

    def test_custom_thresholds_keep_ap50(self, rng):
        inst = random_eval_instance(np.random.default_rng(3))
        gset, dlist = build(*inst)
        base = evaluate(gset, dlist)
        custom = evaluate(gset, dlist, EvalConfig(iou_thresholds=(0.3, 0.6)))
        assert custom.ap50 == base.ap50 and custom.ap75 == base.ap75

    def test_permutation_invariance(self, rng):
        images, cats, gts, dets = random_eval_instance(rng)
        gset, dlist = build(images, cats, gts, dets)
        a = evaluate(gset, dlist)
        order = rng.permutation(len(dlist))
        b = evaluate(gset, [dlist[i] for i in order])
        assert a.metrics() == b.metrics() and a.per_category == b.per_category

    def test_threshold_monotonicity(self, rng):
        for _ in range(20):
            gset, dlist = build(*random_eval_instance(rng))
            aps = [evaluate(gset, dlist, EvalConfig(iou_thresholds=(t,))).ap for t in (0.3, 0.5, 0.7, 0.9)]
            if aps[0] is not None:
                assert all(x >= y - 1e-12 for x, y in zip(aps, aps[1:]))

    def test_adding_true_positive_never_hurts(self, rng):
        checked = 0
        for _ in range(40):
            images, cats, gts, dets = random_eval_instance(rng)
            gset, dlist = build(images, cats, gts, dets)
            free = [g for g in gts if not _overlapped(dlist, *g)]
            if not free:
                continue
            image, cat, box = free[int(rng.integers(len(free)))]
            before = evaluate(gset, dlist).metrics()
            after = evaluate(gset, dlist + [Detection(image, cat, Box(*box), 1.0)]).metrics()
            for m, v in before.items():
                if v is not None:
                    assert after[m] >= v - 1e-12, m
            checked += 1
        assert checked > 10

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EvalConfig(iou_thresholds=(0.7, 0.5))
        with pytest.raises(ConfigError):
            EvalConfig(size_boundaries=(2, 8, 8, 32, 64))
        with pytest.raises(ConfigError):
            EvalConfig(max_dets_per_image=0)


def _overlapped(dlist, image, cat, box):
    """True if a detection of the same image and category touches the gt."""
    target = Box(*box)
    return any(d.image_id == image and d.category_id == cat and iou(d.box, target) > 0 for d in dlist)


class TestCoco:
    def gt_doc(self):
        return {
            "images": [{"id": 1}, {"id": 2}],
            "categories": [{"id": 1, "name": "vehicle"}, {"id": 2, "name": "ship"}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 4, 4]},
                {"id": 2, "image_id": 2, "category_id": 2, "bbox": [10, 10, 20, 20]},
            ],
        }

    def test_roundtrip(self, tmp_path):
        p = tmp_path / "gt.json"
        p.write_text(json.dumps(self.gt_doc()))
        gset = load_coco_gt(p)
        assert gset.count() == 2 and gset.categories[1] == "vehicle"
        dets = load_coco_dets([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 4, 4], "score": 0.9}])
        report = evaluate(gset, dets)
        assert report.per_category == {1: 1.0, 2: 0.0}
        rows = dict(report_rows(report, gset.categories))
        assert rows["ap_cat_vehicle"] == "1.000000"
        assert rows["ap_m"] == ""
        assert "AP very tiny" in format_table(report, gset.categories)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "gt.json"
        p.write_text(json.dumps(self.gt_doc())[:-30])
        with pytest.raises(IngestionError) as e:
            load_coco_gt(p)
        assert "gt.json:1:" in str(e.value)

    def test_bad_bbox_names_record(self):
        doc = self.gt_doc()
        doc["annotations"][1]["bbox"] = [1, 2, 3]
        with pytest.raises(IngestionError, match=r"annotations\[1\]"):
            load_coco_gt(doc)

    def test_zero_size_bbox(self):
        doc = self.gt_doc()
        doc["annotations"][0]["bbox"] = [1, 2, 0, 3]
        with pytest.raises(IngestionError, match=r"annotations\[0\]"):
            load_coco_gt(doc)

    def test_unknown_annotation_ids(self):
        doc = self.gt_doc()
        doc["annotations"][0]["image_id"] = 99
        with pytest.raises(IngestionError, match="annotations"):
            load_coco_gt(doc)

    def test_bad_detection_score(self):
        with pytest.raises(IngestionError, match=r"detections\[0\]"):
            load_coco_dets([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 4, 4], "score": 1.5}])

    def test_missing_field(self):
        with pytest.raises(IngestionError, match="score"):
            load_coco_dets([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 4, 4]}])
