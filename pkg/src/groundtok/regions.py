"""Region proposals, multi-scale ROIAlign encoding, and the proxy registry.

A proposal backend (synthetic here, standing in for a detector head) emits
scored boxes; post-processing filters them by objectness, applies greedy
NMS, and keeps the top-k. Survivors plus user-supplied boxes are pooled
from the feature pyramid with quantization-free ROIAlign and fused into
fixed-width region embeddings, each bound to a proxy index ``<r_i>``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BoundingBox, ScoredBox, nms
from .rng import GENERATOR_ID, make_rng
from .serialization import dump_json, read_tokens, write_tokens
from .tokenizer import FeaturePyramid, TokenGrid, bilinear_sample

log = logging.getLogger(__name__)

DEFAULT_BINS = (7, 7)
DEFAULT_SAMPLES = (2, 2)

ORIGIN_PROPOSED = "proposed"
ORIGIN_USER = "user"


@dataclass(frozen=True)
class RegionProposal:
    box: BoundingBox
    objectness: float
    clamped: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be in [0, 1], got {self.objectness}")


@dataclass(frozen=True)
class ProposerConfig:
    num_proposals: int = 300
    score_threshold: float = 0.15
    nms_threshold: float = 0.6
    max_keep: int = 100

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_threshold <= 1.0 and 0.0 <= self.nms_threshold <= 1.0):
            raise ValueError("thresholds must be in [0, 1]")
        if self.max_keep > self.num_proposals:
            raise ValueError(f"max_keep {self.max_keep} exceeds num_proposals {self.num_proposals}")


class RegionToken:
    """A region embedding anchored to its source box and proxy index."""

    __slots__ = ("embedding", "source_box", "proxy_index", "origin")

    def __init__(self, embedding: np.ndarray, source_box: BoundingBox, proxy_index: int, origin: str):
        if origin not in (ORIGIN_PROPOSED, ORIGIN_USER):
            raise ValueError(f"unknown origin {origin!r}")
        if proxy_index < 1:
            raise ValueError(f"proxy_index must be >= 1, got {proxy_index}")
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.source_box = source_box
        self.proxy_index = proxy_index
        self.origin = origin


class ProxyRegistry:
    """Ordered region tokens with contiguous proxy indices 1..n."""

    def __init__(self, image_id: str, entries: Sequence[RegionToken] = ()):
        self.image_id = image_id
        self.entries: list[RegionToken] = list(entries)
        self._validate()

    def _validate(self) -> None:
        for pos, token in enumerate(self.entries, start=1):
            if token.proxy_index != pos:
                raise ValueError(f"proxy indices must be contiguous from 1; entry {pos} has {token.proxy_index}")
        widths = {t.embedding.shape for t in self.entries}
        if len(widths) > 1:
            raise ValueError(f"embedding widths differ within registry: {sorted(widths)}")

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, proxy_index: int) -> RegionToken:
        if not (1 <= proxy_index <= len(self.entries)):
            raise KeyError(f"proxy index {proxy_index} not in registry of size {len(self.entries)}")
        return self.entries[proxy_index - 1]

    def embeddings(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0), dtype=np.float64)
        return np.stack([t.embedding for t in self.entries])

    def save(self, directory: str | Path, basename: str = "registry") -> tuple[Path, Path]:
        """Write ``<basename>.json`` plus the embedding container next to it."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        emb_path = directory / f"{basename}.tokens"
        json_path = directory / f"{basename}.json"
        write_tokens(emb_path, self.embeddings())
        doc = {
            "image_id": self.image_id,
            "generator": GENERATOR_ID,
            "embeddings_file": emb_path.name,
            "entries": [
                {
                    "proxy": t.proxy_index,
                    "box": t.source_box.to_list(),
                    "origin": t.origin,
                    "embedding_ref": t.proxy_index - 1,
                }
                for t in self.entries
            ],
        }
        dump_json(doc, json_path)
        return json_path, emb_path

    @classmethod
    def load(cls, json_path: str | Path) -> "ProxyRegistry":
        json_path = Path(json_path)
        with open(json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        embeddings, _ = read_tokens(json_path.parent / doc["embeddings_file"])
        entries = []
        for item in doc["entries"]:
            entries.append(
                RegionToken(
                    embeddings[item["embedding_ref"]],
                    BoundingBox.from_list(item["box"]),
                    item["proxy"],
                    item["origin"],
                )
            )
        return cls(doc["image_id"], entries)


def synthetic_propose(
    gt_boxes: Sequence[BoundingBox],
    jitter: float,
    num: int,
    seed: int,
    image_size: tuple[float, float] = (448.0, 448.0),
) -> list[RegionProposal]:
    """Seeded proposal backend: jittered copies of the GT boxes plus distractors.

    Each GT box gets its corners shifted by uniform noise scaled by
    ``jitter`` and the box size, with objectness strictly decreasing in the
    relative perturbation (0.95 at zero jitter). The remaining ``num - len(gt)``
    slots are random boxes whose objectness stays below the default 0.15
    score threshold. Deterministic in (inputs, seed).
    """
    if num < 1:
        raise ValueError(f"num must be >= 1, got {num}")
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    height, width = float(image_size[0]), float(image_size[1])
    rng = make_rng(seed, "synthetic-proposer")

    proposals: list[RegionProposal] = []
    for box in gt_boxes[:num]:
        noise = rng.uniform(-1.0, 1.0, size=4)
        if jitter == 0.0:
            jittered = box
        else:
            w, h = box.width, box.height
            shift = noise * jitter * np.array([w, h, w, h])
            x0, y0 = box.x_min + shift[0], box.y_min + shift[1]
            x1, y1 = box.x_max + shift[2], box.y_max + shift[3]
            jittered = BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
        rel = float(np.mean(np.abs(noise))) * jitter
        objectness = 0.2 + 0.75 * float(np.exp(-4.0 * rel))
        proposals.append(RegionProposal(jittered, objectness))

    for _ in range(num - len(proposals)):
        cx = rng.uniform(0.0, width)
        cy = rng.uniform(0.0, height)
        w = rng.uniform(width / 32.0, width / 4.0)
        h = rng.uniform(height / 32.0, height / 4.0)
        box = BoundingBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).clamp(width, height)
        proposals.append(RegionProposal(box, float(rng.uniform(0.02, 0.14))))
    return proposals


def postprocess(proposals: Sequence[RegionProposal], cfg: ProposerConfig) -> list[RegionProposal]:
    """Objectness filter, greedy NMS, top-k; output sorted by descending objectness."""
    survivors = [p for p in proposals if p.objectness >= cfg.score_threshold]
    scored = [ScoredBox(p.box, p.objectness) for p in survivors]
    kept = nms(scored, cfg.nms_threshold)
    return [survivors[i] for i in kept[: cfg.max_keep]]


def roi_align_level(
    grid: TokenGrid,
    box: BoundingBox,
    image_size: tuple[float, float],
    bins: tuple[int, int] = DEFAULT_BINS,
    samples_per_bin: tuple[int, int] = DEFAULT_SAMPLES,
) -> np.ndarray:
    """Quantization-free ROIAlign of one pyramid level over a box.

    The box is mapped into the grid's continuous frame by
    (rows/image_height, cols/image_width), split into bins, and each bin
    averages ``sy * sx`` bilinear samples placed at regular cell-interior
    positions. Returns a (bin_rows, bin_cols, dim) array.
    """
    if box.area <= 0.0:
        raise ValueError(f"degenerate region: {box.to_list()}")
    bin_rows, bin_cols = bins
    sy, sx = samples_per_bin
    if bin_rows < 1 or bin_cols < 1 or sy < 1 or sx < 1:
        raise ValueError(f"bins and samples must be >= 1, got bins={bins} samples={samples_per_bin}")

    height, width = float(image_size[0]), float(image_size[1])
    y0 = box.y_min * grid.rows / height
    y1 = box.y_max * grid.rows / height
    x0 = box.x_min * grid.cols / width
    x1 = box.x_max * grid.cols / width

    cell_h = (y1 - y0) / bin_rows
    cell_w = (x1 - x0) / bin_cols
    # Sample point grid: within bin i, sub-sample a sits at i + (a+0.5)/sy cells.
    ys = y0 + cell_h * (np.arange(bin_rows)[:, None] + (np.arange(sy)[None, :] + 0.5) / sy)
    xs = x0 + cell_w * (np.arange(bin_cols)[:, None] + (np.arange(sx)[None, :] + 0.5) / sx)

    yy = ys[:, None, :, None]
    xx = xs[None, :, None, :]
    yy, xx = np.broadcast_arrays(yy, xx)
    sampled = bilinear_sample(grid.data, yy, xx)
    return sampled.mean(axis=(2, 3))


def encode_region(
    pyramid: FeaturePyramid,
    box: BoundingBox,
    image_size: tuple[float, float],
    bins: tuple[int, int] = DEFAULT_BINS,
    samples_per_bin: tuple[int, int] = DEFAULT_SAMPLES,
    seed: int = 0,
    identity_maps: bool = False,
) -> np.ndarray:
    """Fuse per-level ROIAlign features into a single region embedding.

    Pools each of the three pyramid levels over the box, maps each pooled
    grid through a seeded per-level affine to the common width, sums the
    levels, and averages over the spatial cells. ``identity_maps`` replaces
    the affines with identity (test hook; requires equal level widths).
    """
    if len(pyramid) != 3:
        raise ValueError(f"pyramid must have exactly 3 levels, got {len(pyramid)}")
    out_dim = pyramid.levels[0].grid.dim

    fused: np.ndarray | None = None
    for index, level in enumerate(pyramid.levels):
        pooled = roi_align_level(level.grid, box, image_size, bins, samples_per_bin)
        flat = pooled.reshape(-1, level.grid.dim)
        if identity_maps:
            if level.grid.dim != out_dim:
                raise ValueError("identity maps require equal level widths")
            mapped = flat
        else:
            rng = make_rng(seed, "region-encoder", str(index))
            w = rng.normal(0.0, 1.0, size=(level.grid.dim, out_dim)) / np.sqrt(level.grid.dim)
            b = rng.normal(0.0, 0.1, size=out_dim)
            mapped = flat @ w + b
        fused = mapped if fused is None else fused + mapped
    assert fused is not None
    return fused.mean(axis=0)


def register(
    proposals: Sequence[RegionProposal],
    user_boxes: Sequence[BoundingBox],
    pyramid: FeaturePyramid,
    image_size: tuple[float, float],
    bins: tuple[int, int] = DEFAULT_BINS,
    samples_per_bin: tuple[int, int] = DEFAULT_SAMPLES,
    seed: int = 0,
    image_id: str = "",
    identity_maps: bool = False,
) -> ProxyRegistry:
    """Encode post-processed proposals then user boxes into a registry.

    Proposals come first (already in descending objectness), user boxes
    follow in input order; proxy indices run 1..n in that order. Boxes are
    clamped to the image before encoding; a proposal that clamps to zero
    area is dropped with a log note, a degenerate user box is an error.
    """
    height, width = float(image_size[0]), float(image_size[1])
    entries: list[RegionToken] = []

    def encode(b: BoundingBox) -> np.ndarray:
        return encode_region(pyramid, b, image_size, bins, samples_per_bin, seed, identity_maps)

    for proposal in proposals:
        clamped = proposal.box.clamp(width, height)
        if clamped.area <= 0.0:
            log.warning("dropping proposal that clamps to zero area: %s", proposal.box.to_list())
            continue
        entries.append(RegionToken(encode(clamped), clamped, len(entries) + 1, ORIGIN_PROPOSED))

    for box in user_boxes:
        clamped = box.clamp(width, height)
        if clamped.area <= 0.0:
            raise ValueError(f"degenerate region: user box {box.to_list()} has zero area in image")
        entries.append(RegionToken(encode(clamped), clamped, len(entries) + 1, ORIGIN_USER))

    return ProxyRegistry(image_id, entries)
