"""Multi-box grounding recall protocols and REC accuracy.

Three recall rules for items with several ground-truth boxes:

* ANY: recall 1 if any prediction hits any ground-truth box.
* MERGED-BOXES: recall 1 if the top-scored prediction hits the smallest
  box enclosing all ground truth.
* AS-MANY: take the top-k predictions (k = number of ground-truth boxes),
  match them one-to-one to ground truth, recall = matched / k.

A hit means IoU >= t (boundary inclusive). Average recall (AR) averages
the per-threshold mean recall over the 10 thresholds 0.50..0.95 in steps
of 0.05. Aggregation uses exact rational arithmetic so the report is
identical under any permutation or parallel partitioning of the items.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

from .geometry import BoundingBox, ScoredBox, SizeBucket, enclosing_box, iou, size_bucket

# (50 + 5i) / 100 rather than accumulated 0.05 steps, so an IoU computed as
# an exact ratio (e.g. 70/100) compares equal at its own threshold.
IOU_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))

PROTOCOLS = ("any", "merged", "as_many")


@dataclass(frozen=True)
class GroundingItem:
    image_id: str
    query: str
    gt_boxes: tuple[BoundingBox, ...]

    def __post_init__(self) -> None:
        if not self.gt_boxes:
            raise ValueError(f"item {self.image_id!r}/{self.query!r} has no ground-truth boxes")


def top_k(preds: Sequence[ScoredBox], k: int) -> list[ScoredBox]:
    """Top-k by score, ties broken by input order."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    return [preds[i] for i in order[:k]]


def greedy_match(preds: Sequence[ScoredBox], gts: Sequence[BoundingBox], t: float) -> int:
    """One-to-one greedy matching; preds must be sorted by descending score.

    Each prediction takes the unmatched ground-truth box with the highest
    IoU, provided that IoU >= t (ties go to the lower GT index). Returns
    the number of matched ground-truth boxes.
    """
    unmatched = list(range(len(gts)))
    matched = 0
    for pred in preds:
        if not unmatched:
            break
        best_j = -1
        best_iou = 0.0
        for j in unmatched:
            value = iou(pred.box, gts[j])
            if value > best_iou:
                best_iou = value
                best_j = j
        if best_j >= 0 and best_iou >= t:
            unmatched.remove(best_j)
            matched += 1
    return matched


def optimal_match(preds: Sequence[ScoredBox], gts: Sequence[BoundingBox], t: float) -> int:
    """Maximum-cardinality one-to-one matching over pairs with IoU >= t."""
    edges = [[j for j in range(len(gts)) if iou(pred.box, gts[j]) >= t] for pred in preds]
    match_of_gt: dict[int, int] = {}

    def augment(i: int, seen: set[int]) -> bool:
        for j in edges[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in match_of_gt or augment(match_of_gt[j], seen):
                match_of_gt[j] = i
                return True
        return False

    count = 0
    for i in range(len(preds)):
        if augment(i, set()):
            count += 1
    return count


def recall_any(item: GroundingItem, preds: Sequence[ScoredBox], t: float) -> float:
    for pred in preds:
        for gt in item.gt_boxes:
            if iou(pred.box, gt) >= t:
                return 1.0
    return 0.0


def recall_merged(item: GroundingItem, preds: Sequence[ScoredBox], t: float) -> float:
    if not preds:
        return 0.0
    top = top_k(preds, 1)[0]
    merged = enclosing_box(item.gt_boxes)
    return 1.0 if iou(top.box, merged) >= t else 0.0


def recall_as_many(
    item: GroundingItem,
    preds: Sequence[ScoredBox],
    t: float,
    matching: str = "greedy",
) -> float:
    k = len(item.gt_boxes)
    selected = top_k(preds, k)
    if matching == "greedy":
        matched = greedy_match(selected, item.gt_boxes, t)
    elif matching == "optimal":
        matched = optimal_match(selected, item.gt_boxes, t)
    else:
        raise ValueError(f"unknown matching {matching!r}")
    return matched / k


def _as_many_fraction(
    gts: Sequence[BoundingBox], preds: Sequence[ScoredBox], t: float, matching: str
) -> Fraction:
    k = len(gts)
    selected = top_k(preds, k)
    if matching == "optimal":
        matched = optimal_match(selected, gts, t)
    else:
        matched = greedy_match(selected, gts, t)
    return Fraction(matched, k)


def rec_accuracy(items: Sequence[GroundingItem], preds: Sequence[Sequence[ScoredBox]]) -> float:
    """Fraction of single-box items whose top prediction has IoU >= 0.5."""
    if len(items) != len(preds):
        raise ValueError(f"{len(items)} items but {len(preds)} prediction lists")
    hits = 0
    for item, item_preds in zip(items, preds):
        if len(item.gt_boxes) != 1:
            raise ValueError(f"not a REC item: {item.image_id!r}/{item.query!r} has {len(item.gt_boxes)} boxes")
        if item_preds:
            top = top_k(item_preds, 1)[0]
            if iou(top.box, item.gt_boxes[0]) >= 0.5:
                hits += 1
    return hits / len(items) if items else 0.0


@dataclass
class EvalReport:
    protocol: str
    thresholds: tuple[float, ...]
    item_count: int
    ar: float
    ar_at_50: float
    ar_at_75: float
    per_threshold: list[float] = field(default_factory=list)
    ar_small: float | None = None
    ar_medium: float | None = None
    ar_large: float | None = None
    acc_at_50: float | None = None
    bucket_counts: dict[str, int] = field(default_factory=dict)
    per_item: list[dict[str, Any]] = field(default_factory=list)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol,
            "thresholds": list(self.thresholds),
            "item_count": self.item_count,
            "metrics": {
                "ar": self.ar,
                "ar_at_50": self.ar_at_50,
                "ar_at_75": self.ar_at_75,
                "ar_small": self.ar_small,
                "ar_medium": self.ar_medium,
                "ar_large": self.ar_large,
                "acc_at_50": self.acc_at_50,
            },
            "per_threshold": self.per_threshold,
            "bucket_counts": self.bucket_counts,
            "per_item": self.per_item,
        }

    def metrics_block(self) -> str:
        """Flat tab-delimited metric lines for CI diffing."""
        lines = [
            f"protocol\t{self.protocol}",
            f"items\t{self.item_count}",
            f"AR\t{self.ar:.6f}",
            f"AR@0.5\t{self.ar_at_50:.6f}",
            f"AR@0.75\t{self.ar_at_75:.6f}",
        ]
        for name, value in (("AR@s", self.ar_small), ("AR@m", self.ar_medium), ("AR@l", self.ar_large)):
            if value is not None:
                lines.append(f"{name}\t{value:.6f}")
        if self.acc_at_50 is not None:
            lines.append(f"Acc@0.5\t{self.acc_at_50:.6f}")
        return "\n".join(lines) + "\n"


def _item_recall(item: GroundingItem, preds: Sequence[ScoredBox], t: float, protocol: str, matching: str) -> Fraction:
    if protocol == "any":
        return Fraction(int(recall_any(item, preds, t)))
    if protocol == "merged":
        return Fraction(int(recall_merged(item, preds, t)))
    if protocol == "as_many":
        return _as_many_fraction(item.gt_boxes, preds, t, matching)
    raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


def evaluate_item(
    item: GroundingItem,
    preds: Sequence[ScoredBox],
    protocol: str,
    matching: str = "greedy",
) -> dict[str, Any]:
    """Per-item recalls at every threshold, plus per-bucket recalls for AS-MANY.

    The returned dict is pure data (fractions as (num, den) pairs), so item
    evaluation can run in any order or process and aggregate identically.
    """
    recalls = [_item_recall(item, preds, t, protocol, matching) for t in IOU_THRESHOLDS]
    record: dict[str, Any] = {
        "image_id": item.image_id,
        "query": item.query,
        "gt_count": len(item.gt_boxes),
        "pred_count": len(preds),
        "recalls": [(r.numerator, r.denominator) for r in recalls],
    }
    if protocol == "as_many":
        buckets: dict[str, list[tuple[int, int]] | None] = {}
        for bucket in SizeBucket:
            subset = [g for g in item.gt_boxes if size_bucket(g) is bucket]
            if not subset:
                buckets[bucket.value] = None
                continue
            values = [_as_many_fraction(subset, preds, t, matching) for t in IOU_THRESHOLDS]
            buckets[bucket.value] = [(v.numerator, v.denominator) for v in values]
        record["bucket_recalls"] = buckets
    return record


def aggregate_report(records: Sequence[dict[str, Any]], protocol: str) -> EvalReport:
    """Exact aggregation of per-item records into an EvalReport."""
    n = len(records)
    n_thresholds = len(IOU_THRESHOLDS)

    def mean_at(values: list[list[Fraction]], t_index: int) -> Fraction:
        if not values:
            return Fraction(0)
        return sum((v[t_index] for v in values), Fraction(0)) / len(values)

    all_recalls = [[Fraction(*pair) for pair in rec["recalls"]] for rec in records]
    per_threshold = [mean_at(all_recalls, i) for i in range(n_thresholds)]
    ar = sum(per_threshold, Fraction(0)) / n_thresholds

    report = EvalReport(
        protocol=protocol,
        thresholds=IOU_THRESHOLDS,
        item_count=n,
        ar=float(ar),
        ar_at_50=float(per_threshold[0]),
        ar_at_75=float(per_threshold[5]),
        per_threshold=[float(v) for v in per_threshold],
    )

    if protocol == "as_many":
        for bucket in SizeBucket:
            rows = [
                [Fraction(*pair) for pair in rec["bucket_recalls"][bucket.value]]
                for rec in records
                if rec.get("bucket_recalls", {}).get(bucket.value) is not None
            ]
            report.bucket_counts[bucket.value] = len(rows)
            value = float(sum((mean_at(rows, i) for i in range(n_thresholds)), Fraction(0)) / n_thresholds) if rows else 0.0
            if bucket is SizeBucket.SMALL:
                report.ar_small = value
            elif bucket is SizeBucket.MEDIUM:
                report.ar_medium = value
            else:
                report.ar_large = value

    for rec in records:
        recalls = [Fraction(*pair) for pair in rec["recalls"]]
        report.per_item.append(
            {
                "image_id": rec["image_id"],
                "query": rec["query"],
                "gt_count": rec["gt_count"],
                "pred_count": rec["pred_count"],
                "recall_at_50": float(recalls[0]),
                "mean_recall": float(sum(recalls, Fraction(0)) / n_thresholds),
            }
        )
    return report


def compute_report(
    items: Sequence[GroundingItem],
    preds: Sequence[Sequence[ScoredBox]],
    protocol: str,
    matching: str = "greedy",
    rec: bool = False,
) -> EvalReport:
    """Evaluate every item and aggregate; ``rec`` adds Acc@0.5 (single-GT items)."""
    if len(items) != len(preds):
        raise ValueError(f"{len(items)} items but {len(preds)} prediction lists")
    records = [evaluate_item(item, p, protocol, matching) for item, p in zip(items, preds)]
    report = aggregate_report(records, protocol)
    if rec:
        report.acc_at_50 = rec_accuracy(items, preds)
    return report
