from __future__ import annotations

import random
from fractions import Fraction

import pytest

from groundtok.evalprotocols import (
    IOU_THRESHOLDS,
    EvalReport,
    GroundingItem,
    compute_report,
    evaluate_item,
    aggregate_report,
    greedy_match,
    optimal_match,
    rec_accuracy,
    recall_any,
    recall_as_many,
    recall_merged,
    top_k,
)
from groundtok.geometry import BoundingBox, ScoredBox, iou
from groundtok.selftest import oracle_max_matching

from conftest import box, random_scored


def scored(b: BoundingBox, s: float) -> ScoredBox:
    return ScoredBox(b, s)


def item(*boxes: BoundingBox, image_id="img", query="q") -> GroundingItem:
    return GroundingItem(image_id, query, tuple(boxes))


FIVE_GT = [box(20 * i, 0, 20 * i + 10, 10) for i in range(5)]


def test_thresholds_are_the_ten_standard_ones():
    assert IOU_THRESHOLDS == tuple((50 + 5 * i) / 100 for i in range(10))
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95


class TestGreedyMatch:
    def test_identical_preds_match_all(self):
        preds = [scored(b, 0.9 - 0.01 * i) for i, b in enumerate(FIVE_GT)]
        assert greedy_match(preds, FIVE_GT, 1.0) == 5

    def test_below_threshold(self):
        gt = [box(0, 0, 10, 10)]
        pred = [scored(box(0, 3, 10, 10), 0.9)]  # IoU 0.7
        assert greedy_match(pred, gt, 0.75) == 0
        assert greedy_match(pred, gt, 0.7) == 1

    def test_one_to_one(self):
        # Two preds both overlap only GT#1 above t; second GT untouched.
        gts = [box(0, 0, 10, 10), box(50, 50, 60, 60)]
        preds = [scored(box(0, 0, 10, 10), 0.9), scored(box(1, 1, 11, 11), 0.8)]
        assert greedy_match(preds, gts, 0.5) == 1


class TestRecallAny:
    def test_single_hit_of_five(self):
        preds = [scored(FIVE_GT[2], 0.9)]
        assert recall_any(item(*FIVE_GT), preds, 0.5) == 1.0

    def test_empty_predictions(self):
        assert recall_any(item(*FIVE_GT), [], 0.5) == 0.0

    def test_all_below_threshold(self):
        preds = [scored(box(0, 4, 10, 14), 0.9)]  # IoU 6/14 < 0.5 with GT#0
        assert iou(preds[0].box, FIVE_GT[0]) < 0.5
        assert recall_any(item(*FIVE_GT), preds, 0.5) == 0.0


class TestRecallMerged:
    def test_exact_enclosing_box(self):
        gts = [box(0, 0, 1, 1), box(9, 9, 10, 10)]
        preds = [scored(box(0, 0, 10, 10), 0.9)]
        assert recall_merged(item(*gts), preds, 0.5) == 1.0

    def test_two_cluster_miss(self):
        # Enclosing box is [0,0,10,10]; the prediction covers 1/100 of it.
        gts = [box(0, 0, 1, 1), box(9, 9, 10, 10)]
        preds = [scored(box(0, 0, 1, 1), 0.9)]
        assert recall_merged(item(*gts), preds, 0.5) == 0.0

    def test_empty_predictions(self):
        assert recall_merged(item(*FIVE_GT), [], 0.5) == 0.0

    def test_uses_top_scored_only(self):
        gts = [box(0, 0, 10, 10)]
        preds = [scored(box(40, 40, 50, 50), 0.9), scored(box(0, 0, 10, 10), 0.1)]
        assert recall_merged(item(*gts), preds, 0.5) == 0.0


class TestRecallAsMany:
    def test_three_of_five(self):
        # Top-5 predictions hit 3 of the 5 ground-truth boxes: recall 60%.
        preds = [scored(FIVE_GT[i], 0.9 - 0.1 * i) for i in range(3)]
        preds += [scored(box(500 + 20 * i, 500, 510 + 20 * i, 510), 0.5 - 0.1 * i) for i in range(2)]
        assert recall_as_many(item(*FIVE_GT), preds, 0.5) == pytest.approx(0.6)

    def test_perfect(self):
        preds = [scored(b, 0.9) for b in FIVE_GT]
        assert recall_as_many(item(*FIVE_GT), preds, 0.95) == 1.0

    def test_fewer_preds_than_gt(self):
        gts = [box(30 * i, 0, 30 * i + 10, 10) for i in range(4)]
        preds = [scored(gts[0], 0.9), scored(gts[2], 0.8)]
        assert recall_as_many(item(*gts), preds, 0.5) == 0.25 * 2

    def test_top_k_selection_by_score(self):
        # The best-scored k predictions are used, not the best-matching ones.
        gts = [box(0, 0, 10, 10)]
        preds = [scored(box(40, 40, 50, 50), 0.9), scored(gts[0], 0.2)]
        assert recall_as_many(item(*gts), preds, 0.5) == 0.0

    def test_score_tie_breaks_by_input_order(self):
        gts = [box(0, 0, 10, 10)]
        preds = [scored(box(40, 40, 50, 50), 0.5), scored(gts[0], 0.5)]
        assert recall_as_many(item(*gts), preds, 0.5) == 0.0
        assert recall_as_many(item(*gts), list(reversed(preds)), 0.5) == 1.0


class TestRecAccuracy:
    def test_all_exact(self):
        items = [item(b) for b in FIVE_GT]
        preds = [[scored(b, 0.9)] for b in FIVE_GT]
        assert rec_accuracy(items, preds) == 1.0

    def test_half(self):
        items = [item(box(0, 0, 10, 10)), item(box(50, 50, 60, 60))]
        preds = [[scored(box(0, 0, 10, 10), 0.9)], [scored(box(0, 0, 5, 5), 0.9)]]
        assert rec_accuracy(items, preds) == 0.5

    def test_boundary_iou_exactly_half_is_hit(self):
        gt = box(0, 0, 10, 10)
        pred = scored(box(0, 0, 10, 5), 0.9)  # IoU = 50/100
        assert iou(pred.box, gt) == 0.5
        assert rec_accuracy([item(gt)], [[pred]]) == 1.0

    def test_non_rec_item_rejected(self):
        with pytest.raises(ValueError, match="not a REC item"):
            rec_accuracy([item(*FIVE_GT)], [[]])

    def test_empty_predictions_miss(self):
        assert rec_accuracy([item(box(0, 0, 1, 1))], [[]]) == 0.0


class TestComputeReport:
    def test_iou_070_threshold_sweep(self):
        # Single GT, single prediction at IoU exactly 0.70: hits the 5
        # thresholds 0.50..0.70, misses 0.75..0.95.
        gt = box(0, 0, 10, 10)
        pred = scored(box(0, 3, 10, 10), 0.9)
        assert iou(pred.box, gt) == 0.7
        for protocol in ("any", "merged", "as_many"):
            report = compute_report([item(gt)], [[pred]], protocol)
            assert report.ar == 0.5
            assert report.ar_at_50 == 1.0
            assert report.ar_at_75 == 0.0

    def test_perfect_and_empty(self):
        items = [item(*FIVE_GT), item(box(0, 0, 40, 40))]
        perfect = [[scored(b, 0.9) for b in it.gt_boxes] for it in items]
        report = compute_report(items, perfect, "as_many")
        assert report.ar == report.ar_at_50 == report.ar_at_75 == 1.0
        report = compute_report(items, [[], []], "as_many")
        assert report.ar == report.ar_at_50 == report.ar_at_75 == 0.0

    def test_monotone_in_threshold(self, rnd):
        items = []
        preds = []
        for _ in range(30):
            gts = [sb.box for sb in random_scored(rnd, rnd.randint(1, 5), extent=40)]
            items.append(item(*gts))
            preds.append(random_scored(rnd, rnd.randint(0, 6), extent=40))
        for protocol in ("any", "merged", "as_many"):
            report = compute_report(items, preds, protocol)
            curve = report.per_threshold
            assert all(a >= b for a, b in zip(curve, curve[1:]))
            assert report.ar == pytest.approx(sum(curve) / len(curve))

    def test_as_many_le_any(self, rnd):
        for _ in range(200):
            gts = [sb.box for sb in random_scored(rnd, rnd.randint(1, 5), extent=40)]
            preds = random_scored(rnd, rnd.randint(0, 6), extent=40)
            it = item(*gts)
            for t in (0.5, 0.75):
                assert recall_as_many(it, preds, t) <= recall_any(it, preds, t)

    def test_as_many_values_are_multiples_of_inverse_k(self, rnd):
        for _ in range(100):
            k = rnd.randint(1, 5)
            gts = [sb.box for sb in random_scored(rnd, k, extent=40)]
            preds = random_scored(rnd, rnd.randint(0, 6), extent=40)
            value = recall_as_many(item(*gts), preds, 0.5)
            assert value in [i / k for i in range(k + 1)]

    def test_permutation_and_partition_invariance(self, rnd):
        items = []
        preds = []
        for i in range(40):
            gts = [sb.box for sb in random_scored(rnd, rnd.randint(1, 4), extent=30)]
            items.append(item(*gts, image_id=f"img{i}"))
            preds.append(random_scored(rnd, rnd.randint(0, 5), extent=30))
        base = compute_report(items, preds, "as_many")

        order = list(range(len(items)))
        rnd.shuffle(order)
        shuffled = compute_report([items[i] for i in order], [preds[i] for i in order], "as_many")
        assert shuffled.ar == base.ar
        assert shuffled.ar_at_50 == base.ar_at_50
        assert shuffled.per_threshold == base.per_threshold

        # Aggregating records computed in arbitrary partitions gives the
        # same report as the single pass.
        records = [evaluate_item(it, p, "as_many", "greedy") for it, p in zip(items, preds)]
        again = aggregate_report(records, "as_many")
        assert again.to_json_dict() == base.to_json_dict()

    def test_bucket_metrics_as_many_only(self):
        small = box(0, 0, 10, 10)  # area 100
        large = box(100, 100, 300, 300)  # area 40000
        items = [item(small, large)]
        # Predictions are not pre-filtered by size: the large-bucket top-1
        # is the overall best-scored prediction, which here hits the large
        # GT; the small bucket's top-1 is that same prediction and misses.
        preds = [[scored(large, 0.9), scored(small, 0.8)]]
        report = compute_report(items, preds, "as_many")
        assert report.ar == 1.0  # k=2 overall, both matched
        assert report.ar_large == 1.0
        assert report.ar_small == 0.0
        assert report.ar_medium == 0.0
        assert report.bucket_counts == {"small": 1, "medium": 0, "large": 1}
        report = compute_report(items, preds, "any")
        assert report.ar_small is None and report.ar_large is None

    def test_bucket_restriction_changes_k(self):
        # One small and one large GT; only the large one is predicted. The
        # large-bucket recall is 1 (k=1 there), while overall as-many is 1/2.
        small = box(0, 0, 10, 10)
        large = box(100, 100, 300, 300)
        preds = [[scored(large, 0.9)]]
        report = compute_report([item(small, large)], preds, "as_many")
        assert report.ar_large == 1.0
        assert report.ar_small == 0.0
        assert report.ar == 0.5


class TestMatching:
    def test_greedy_equals_exhaustive_on_small_random(self, rnd):
        for _ in range(300):
            n_gt = rnd.randint(1, 6)
            n_pred = rnd.randint(0, 6)
            gts = [sb.box for sb in random_scored(rnd, n_gt, extent=40)]
            preds = top_k(random_scored(rnd, n_pred, extent=40), n_gt)
            for t in (0.3, 0.5, 0.75):
                matrix = [[iou(p.box, g) for g in gts] for p in preds]
                assert greedy_match(preds, gts, t) == oracle_max_matching(matrix, t)

    def test_optimal_can_beat_greedy_on_adversarial_fixture(self):
        # Pred A overlaps both GTs equally (tie resolved to GT1); pred B
        # clears the threshold only with GT1. Greedy assigns A->GT1 and
        # strands B; optimal matches both.
        gt1 = box(0, 0, 10, 10)
        gt2 = box(4, 0, 14, 10)
        pred_a = scored(box(2, 0, 12, 10), 0.9)
        pred_b = scored(box(0, 0, 10, 10), 0.8)
        t = 0.5
        assert iou(pred_a.box, gt1) == iou(pred_a.box, gt2) == 80 / 120
        assert iou(pred_b.box, gt1) == 1.0 and iou(pred_b.box, gt2) < t
        gts = [gt1, gt2]
        preds = [pred_a, pred_b]
        assert greedy_match(preds, gts, t) == 1
        assert optimal_match(preds, gts, t) == 2
        it = item(*gts)
        assert recall_as_many(it, preds, t) == 0.5
        assert recall_as_many(it, preds, t, matching="optimal") == 1.0

    def test_optimal_matches_exhaustive(self, rnd):
        for _ in range(200):
            n_gt = rnd.randint(1, 6)
            n_pred = rnd.randint(0, 6)
            gts = [sb.box for sb in random_scored(rnd, n_gt, extent=30)]
            preds = random_scored(rnd, n_pred, extent=30)
            matrix = [[iou(p.box, g) for g in gts] for p in preds]
            assert optimal_match(preds, gts, 0.4) == oracle_max_matching(matrix, 0.4)


def test_metrics_block_format():
    report = compute_report([item(box(0, 0, 10, 10))], [[scored(box(0, 0, 10, 10), 1.0)]], "as_many", rec=True)
    block = report.metrics_block()
    lines = block.strip().split("\n")
    assert lines[0] == "protocol\tas_many"
    assert "AR\t1.000000" in lines
    assert "Acc@0.5\t1.000000" in lines
    assert all("\t" in line for line in lines)


def test_item_requires_gt():
    with pytest.raises(ValueError):
        GroundingItem("i", "q", ())
