"""Benchmark construction from COCO-style detection annotations.

For each object category, at most ``max_images_per_category`` images are
sampled (seeded, per-category streams, so counts are seed-independent);
each (category, image) pair becomes one grounding item carrying every
ground-truth box of that category in that image.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .geometry import BoundingBox, ScoredBox
from .evalprotocols import GroundingItem
from .rng import make_rng
from .serialization import dump_jsonl, load_jsonl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSpec:
    categories: tuple[int, ...] | None = None  # None = all categories in the dataset
    max_images_per_category: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_images_per_category < 1:
            raise ValueError("max_images_per_category must be >= 1")


class AnnotatedDataset:
    """COCO-style detection annotations indexed by category and image."""

    def __init__(
        self,
        images: dict[int, dict[str, Any]],
        categories: dict[int, str],
        boxes_by_cat_image: dict[int, dict[int, list[BoundingBox]]],
    ):
        self.images = images
        self.categories = categories
        self.boxes_by_cat_image = boxes_by_cat_image

    @classmethod
    def from_coco_dict(cls, doc: dict[str, Any]) -> "AnnotatedDataset":
        for key in ("images", "annotations", "categories"):
            if key not in doc:
                raise ValueError(f"annotation file missing {key!r} section")
        images = {int(img["id"]): img for img in doc["images"]}
        categories = {int(cat["id"]): str(cat["name"]) for cat in doc["categories"]}
        index: dict[int, dict[int, list[BoundingBox]]] = {cid: {} for cid in categories}
        for pos, ann in enumerate(doc["annotations"]):
            try:
                image_id = int(ann["image_id"])
                cat_id = int(ann["category_id"])
                x, y, w, h = (float(v) for v in ann["bbox"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"annotation #{pos}: {exc}") from exc
            if cat_id not in index:
                raise ValueError(f"annotation #{pos}: unknown category id {cat_id}")
            if image_id not in images:
                raise ValueError(f"annotation #{pos}: unknown image id {image_id}")
            box = BoundingBox(x, y, x + w, y + h)
            index[cat_id].setdefault(image_id, []).append(box)
        return cls(images, categories, index)

    @classmethod
    def from_coco_json(cls, path: str | Path) -> "AnnotatedDataset":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_coco_dict(json.load(fh))


def build_benchmark(dataset: AnnotatedDataset, spec: BenchmarkSpec) -> list[GroundingItem]:
    """Sample at most ``max_images_per_category`` images per category.

    Sampling uses a per-category stream derived from (seed, category id):
    different seeds change which images are picked but never the
    per-category item counts. Categories with no images are skipped with a
    log note. Items come out in (category id, image id) order.
    """
    wanted = spec.categories if spec.categories is not None else tuple(sorted(dataset.categories))
    items: list[GroundingItem] = []
    for cat_id in sorted(wanted):
        if cat_id not in dataset.categories:
            raise ValueError(f"unknown category id {cat_id}")
        by_image = dataset.boxes_by_cat_image.get(cat_id, {})
        candidates = sorted(by_image)
        if not candidates:
            log.info("category %d (%s) has no images; skipped", cat_id, dataset.categories[cat_id])
            continue
        k = min(spec.max_images_per_category, len(candidates))
        rng = make_rng(spec.seed, "benchmark", str(cat_id))
        chosen = sorted(rng.choice(len(candidates), size=k, replace=False).tolist())
        name = dataset.categories[cat_id]
        for pick in chosen:
            image_id = candidates[pick]
            items.append(GroundingItem(str(image_id), name, tuple(by_image[image_id])))
    return items


def write_items(items: Sequence[GroundingItem], path: str | Path) -> None:
    rows = [
        {"image_id": it.image_id, "query": it.query, "gt_boxes": [b.to_list() for b in it.gt_boxes]}
        for it in items
    ]
    dump_jsonl(rows, path)


def read_items(path: str | Path) -> list[GroundingItem]:
    items = []
    for lineno, row in enumerate(load_jsonl(path), start=1):
        try:
            boxes = tuple(BoundingBox.from_list(b) for b in row["gt_boxes"])
            items.append(GroundingItem(str(row["image_id"]), str(row["query"]), boxes))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path!s}:{lineno}: bad item: {exc}") from exc
    return items


def read_predictions(path: str | Path) -> dict[tuple[str, str], list[ScoredBox]]:
    """Load JSON Lines predictions keyed by (image_id, query).

    Each row: {"image_id": ..., "query": ..., "boxes": [[x1,y1,x2,y2], ...],
    "scores": [...]}. Boxes and scores must align.
    """
    table: dict[tuple[str, str], list[ScoredBox]] = {}
    for lineno, row in enumerate(load_jsonl(path), start=1):
        try:
            key = (str(row["image_id"]), str(row["query"]))
            boxes = [BoundingBox.from_list(b) for b in row["boxes"]]
            scores = [float(s) for s in row["scores"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path!s}:{lineno}: bad prediction row: {exc}") from exc
        if len(boxes) != len(scores):
            raise ValueError(f"{path!s}:{lineno}: {len(boxes)} boxes but {len(scores)} scores")
        table.setdefault(key, []).extend(ScoredBox(b, s) for b, s in zip(boxes, scores))
    return table


def write_predictions(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    dump_jsonl(list(rows), path)


def join_predictions(
    items: Sequence[GroundingItem],
    table: dict[tuple[str, str], list[ScoredBox]],
) -> list[list[ScoredBox]]:
    """Align a prediction table to the item list; missing keys score empty."""
    return [table.get((it.image_id, it.query), []) for it in items]


def items_from_coco_for_predictions(
    dataset: AnnotatedDataset,
    keys: Sequence[tuple[str, str]],
) -> list[GroundingItem]:
    """Build items for (image_id, query) pairs straight from COCO annotations.

    The query must equal a category name exactly; the item's ground truth
    is every box of that category in that image.
    """
    name_to_id = {name: cid for cid, name in dataset.categories.items()}
    items = []
    for image_id, query in keys:
        if query not in name_to_id:
            raise ValueError(f"query {query!r} is not a category name")
        cat_id = name_to_id[query]
        boxes = dataset.boxes_by_cat_image.get(cat_id, {}).get(int(image_id))
        if not boxes:
            raise ValueError(f"no ground truth for image {image_id!r} category {query!r}")
        items.append(GroundingItem(str(image_id), query, tuple(boxes)))
    return items
