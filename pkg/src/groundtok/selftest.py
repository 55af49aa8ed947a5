"""Self-checking oracle suites and the selftest gate.

Each oracle is an independent brute-force implementation of an operation's
contract (scalar arithmetic, exhaustive enumeration, dense sampling); the
checks compare the production path against it on seeded fixtures. Two
corruption hooks exist as negative controls: they inject a known bug class
into the checked path and must make the gate fail.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence

import numpy as np

from .evalprotocols import (
    IOU_THRESHOLDS,
    GroundingItem,
    greedy_match,
    rec_accuracy,
    recall_any,
    recall_as_many,
    top_k,
)
from .geometry import BoundingBox, ScoredBox, iou, nms
from .grammar import GroundedResponse, GroundedSpan, parse, serialize
from .regions import roi_align_level
from .tokenizer import TokenGrid, merge_2x2, unmerge_2x2

CORRUPTIONS = ("merge-order", "iou-boundary")

Box = tuple[float, float, float, float]


# ---------------------------------------------------------------------------
# independent oracles


def oracle_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    denom = area_a + area_b - inter
    return inter / denom if denom > 0.0 else 0.0


def oracle_iou_matrix(boxes: Sequence[Box]) -> list[list[float]]:
    n = len(boxes)
    return [[oracle_iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]


def oracle_nms(
    boxes: Sequence[Box],
    scores: Sequence[float],
    threshold: float,
    matrix: list[list[float]] | None = None,
) -> list[int]:
    """Brute-force greedy NMS over a full precomputed pairwise IoU matrix."""
    if matrix is None:
        matrix = oracle_iou_matrix(boxes)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if matrix[i][j] > threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def oracle_bilinear(values: list[list[float]], y: float, x: float) -> float:
    """Scalar bilinear sample with half-pixel centers, weights formulation."""
    rows, cols = len(values), len(values[0])
    v = y - 0.5
    u = x - 0.5
    r0 = int(np.floor(v))
    c0 = int(np.floor(u))
    fy = v - r0
    fx = u - c0

    def at(r: int, c: int) -> float:
        return values[min(max(r, 0), rows - 1)][min(max(c, 0), cols - 1)]

    return (
        (1 - fy) * (1 - fx) * at(r0, c0)
        + (1 - fy) * fx * at(r0, c0 + 1)
        + fy * (1 - fx) * at(r0 + 1, c0)
        + fy * fx * at(r0 + 1, c0 + 1)
    )


def oracle_roi_align(
    values: list[list[list[float]]],
    box: Box,
    image_size: tuple[float, float],
    bins: tuple[int, int],
    samples: tuple[int, int],
) -> list[list[list[float]]]:
    """Dense scalar ROIAlign: every sample point evaluated independently."""
    rows, cols, dim = len(values), len(values[0]), len(values[0][0])
    height, width = image_size
    x0, y0, x1, y1 = box[0] * cols / width, box[1] * rows / height, box[2] * cols / width, box[3] * rows / height
    bin_rows, bin_cols = bins
    sy, sx = samples
    cell_h = (y1 - y0) / bin_rows
    cell_w = (x1 - x0) / bin_cols
    out = [[[0.0] * dim for _ in range(bin_cols)] for _ in range(bin_rows)]
    for i in range(bin_rows):
        for j in range(bin_cols):
            for d in range(dim):
                plane = [[values[r][c][d] for c in range(cols)] for r in range(rows)]
                total = 0.0
                for a in range(sy):
                    for b in range(sx):
                        yy = y0 + cell_h * (i + (a + 0.5) / sy)
                        xx = x0 + cell_w * (j + (b + 0.5) / sx)
                        total += oracle_bilinear(plane, yy, xx)
                out[i][j][d] = total / (sy * sx)
    return out


def oracle_max_matching(ious: list[list[float]], t: float) -> int:
    """Exhaustive maximum one-to-one matching count (tiny instances only)."""
    n_pred = len(ious)
    n_gt = len(ious[0]) if ious else 0

    best = 0

    def recurse(i: int, used: int, count: int) -> None:
        nonlocal best
        if count > best:
            best = count
        if i >= n_pred or count + (n_pred - i) <= best:
            return
        recurse(i + 1, used, count)
        for j in range(n_gt):
            if not used & (1 << j) and ious[i][j] >= t:
                recurse(i + 1, used | (1 << j), count + 1)

    recurse(0, 0, 0)
    return best


# ---------------------------------------------------------------------------
# fixture generation


def random_scored_boxes(rng: random.Random, n: int, extent: float = 100.0) -> list[ScoredBox]:
    out = []
    for _ in range(n):
        x0 = rng.uniform(0, extent * 0.9)
        y0 = rng.uniform(0, extent * 0.9)
        w = rng.uniform(1.0, extent * 0.4)
        h = rng.uniform(1.0, extent * 0.4)
        out.append(ScoredBox(BoundingBox(x0, y0, x0 + w, y0 + h), round(rng.random(), 6)))
    return out


def random_response(rng: random.Random, max_referent: int) -> GroundedResponse:
    words = ("dog", "frisbee", "man", "red car", "tree", "a small bird", "two cups", "the table")
    segments: list[str | GroundedSpan] = []
    plain_allowed = True
    for _ in range(rng.randint(1, 6)):
        if plain_allowed and rng.random() < 0.5:
            segments.append(rng.choice((" is near ", "Then ", " and ", ". ", " over there", "Hello. ")))
            plain_allowed = False
        else:
            count = rng.randint(1, min(3, max_referent))
            referents = tuple(sorted(rng.sample(range(1, max_referent + 1), count)))
            segments.append(GroundedSpan(rng.choice(words), referents))
            plain_allowed = True
    if not segments:
        segments.append("nothing here")
    return GroundedResponse(tuple(segments))


# ---------------------------------------------------------------------------
# checks (each returns an error message or None)


def check_nms(sets: int = 100, max_n: int = 200, seed: int = 2024) -> str | None:
    rng = random.Random(seed)
    thresholds = [round(0.1 * k, 1) for k in range(1, 10)]
    for s in range(sets):
        candidates = random_scored_boxes(rng, rng.randint(1, max_n))
        boxes = [(c.box.x_min, c.box.y_min, c.box.x_max, c.box.y_max) for c in candidates]
        scores = [c.score for c in candidates]
        matrix = oracle_iou_matrix(boxes)
        for t in thresholds:
            got = nms(candidates, t)
            expected = oracle_nms(boxes, scores, t, matrix)
            if got != expected:
                return f"nms mismatch on set {s} threshold {t}: {got} != {expected}"
    return None


def check_roi_align(cases: int = 100, seed: int = 77) -> str | None:
    rng = random.Random(seed)
    for case in range(cases):
        rows = rng.randint(2, 32)
        cols = rng.randint(2, 32)
        dim = rng.randint(1, 3)
        values = [[[rng.uniform(-5, 5) for _ in range(dim)] for _ in range(cols)] for _ in range(rows)]
        grid = TokenGrid(np.array(values))
        height, width = rows * 4.0, cols * 4.0
        x0 = rng.uniform(0, width - 2)
        y0 = rng.uniform(0, height - 2)
        box = BoundingBox(x0, y0, x0 + rng.uniform(1, width - x0), y0 + rng.uniform(1, height - y0))
        bins = (rng.randint(1, 7), rng.randint(1, 7))
        samples = (rng.randint(1, 3), rng.randint(1, 3))
        got = roi_align_level(grid, box, (height, width), bins, samples)
        expected = oracle_roi_align(
            values, (box.x_min, box.y_min, box.x_max, box.y_max), (height, width), bins, samples
        )
        if not np.allclose(got, np.array(expected), rtol=0.0, atol=1e-9):
            return f"roi_align mismatch on case {case}: max err {np.max(np.abs(got - np.array(expected)))}"
    # Constant map must be exact, not just within tolerance.
    const = TokenGrid(np.full((6, 6, 2), 5.0))
    pooled = roi_align_level(const, BoundingBox(1.0, 2.0, 17.0, 13.0), (24.0, 24.0), (3, 3), (2, 2))
    if not np.all(pooled == 5.0):
        return "roi_align constant fixture not exact"
    return None


def check_merge(seed: int = 5, corrupt: str | None = None) -> str | None:
    rng = np.random.Generator(np.random.Philox(key=seed))
    grid = TokenGrid(rng.normal(size=(8, 10, 3)))
    merged = merge_2x2(grid)
    if corrupt == "merge-order":
        # Negative control: swap the TR and BL blocks in the merged channels.
        d = grid.dim
        data = merged.data.copy()
        data[:, :, d : 2 * d], data[:, :, 2 * d : 3 * d] = (
            merged.data[:, :, 2 * d : 3 * d].copy(),
            merged.data[:, :, d : 2 * d].copy(),
        )
        merged = TokenGrid(data)
    # Direct-indexing oracle for the block order TL, TR, BL, BR.
    for r in (0, 3):
        for c in (0, 4):
            expected = np.concatenate(
                [
                    grid.data[2 * r, 2 * c],
                    grid.data[2 * r, 2 * c + 1],
                    grid.data[2 * r + 1, 2 * c],
                    grid.data[2 * r + 1, 2 * c + 1],
                ]
            )
            if not np.array_equal(merged.data[r, c], expected):
                return "merge-block-order: merged token does not follow TL,TR,BL,BR"
    restored = unmerge_2x2(merged)
    if not np.array_equal(restored.data, grid.data):
        return "merge-block-order: unmerge(merge(g)) != g"
    return None


def check_grammar(cases: int = 1000, seed: int = 31) -> str | None:
    rng = random.Random(seed)
    for case in range(cases):
        size = rng.randint(1, 30)
        response = random_response(rng, size)
        text = serialize(response)
        back = parse(text, size)
        if back != response:
            return f"grammar round-trip failed on case {case}: {text!r}"
        if serialize(back) != text:
            return f"grammar reserialization failed on case {case}"
    return None


def check_recalls(cases: int = 1000, seed: int = 91) -> str | None:
    rng = random.Random(seed)
    for case in range(cases):
        n_gt = rng.randint(1, 6)
        n_pred = rng.randint(0, 6)
        gts = [sb.box for sb in random_scored_boxes(rng, n_gt, extent=40.0)]
        preds = random_scored_boxes(rng, n_pred, extent=40.0)
        item = GroundingItem("img", "q", tuple(gts))
        for t in (0.3, 0.5, 0.75):
            as_many = recall_as_many(item, preds, t)
            any_hit = recall_any(item, preds, t)
            if as_many > any_hit:
                return f"recall_as_many > recall_any on case {case} at t={t}"
            selected = top_k(preds, n_gt)
            matrix = [[iou(p.box, g) for g in gts] for p in selected]
            exhaustive = oracle_max_matching(matrix, t)
            greedy = greedy_match(selected, gts, t)
            if greedy != exhaustive:
                return (
                    f"greedy_match {greedy} != exhaustive {exhaustive} on case {case} at t={t}"
                )
    return None


def check_iou_boundary(corrupt: str | None = None) -> str | None:
    # Top prediction overlaps the single GT box at IoU exactly 0.5; the
    # inclusive comparison must count it as a hit.
    gt = BoundingBox(0.0, 0.0, 10.0, 10.0)
    pred = ScoredBox(BoundingBox(0.0, 0.0, 10.0, 5.0), 0.9)
    if abs(iou(pred.box, gt) - 0.5) > 1e-12:
        return "rec-iou-boundary-inclusive: fixture IoU is not 0.5"
    items = [GroundingItem("img", "q", (gt,))]
    if corrupt == "iou-boundary":
        # Negative control: the >= comparison degraded to >.
        acc = 1.0 if iou(pred.box, gt) > 0.5 else 0.0
    else:
        acc = rec_accuracy(items, [[pred]])
    if acc != 1.0:
        return "rec-iou-boundary-inclusive: IoU exactly 0.5 did not count as a hit"
    return None


CHECKS: list[tuple[str, Callable[..., str | None]]] = [
    ("nms-greedy-oracle", check_nms),
    ("roialign-dense-oracle", check_roi_align),
    ("merge-block-order", check_merge),
    ("grammar-round-trip", check_grammar),
    ("recall-protocols", check_recalls),
    ("rec-iou-boundary-inclusive", check_iou_boundary),
]

_CORRUPTIBLE = {"merge-block-order", "rec-iou-boundary-inclusive"}


def run_selftest(corrupt: str | None = None, emit=print) -> bool:
    """Run every oracle suite; returns True iff all pass."""
    if corrupt is not None and corrupt not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corrupt!r}; choose from {CORRUPTIONS}")
    ok = True
    for name, check in CHECKS:
        if name in _CORRUPTIBLE:
            error = check(corrupt=corrupt)
        else:
            error = check()
        if error is None:
            emit(f"PASS {name}")
        else:
            emit(f"FAIL {name}: {error}")
            ok = False
    return ok
