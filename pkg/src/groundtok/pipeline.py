"""End-to-end run: encode, propose, post-process, register, render, assemble."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import RunConfig
from .geometry import BoundingBox
from .grammar import MultimodalSequence, assemble_sequence, render_prompt
from .regions import (
    ProposerConfig,
    ProxyRegistry,
    RegionProposal,
    postprocess,
    register,
    synthetic_propose,
)
from .rng import derive_seed
from .serialization import dump_json, write_tokens
from .tokenizer import (
    EncoderConfig,
    TokenGrid,
    build_pyramid,
    make_constant_image,
    make_noise_image,
    merge_2x2,
    project,
    toy_encode,
)

DEFAULT_INSTRUCTION = "Please briefly describe the image content."


@dataclass
class PipelineResult:
    image_id: str
    registry: ProxyRegistry
    prompt: str
    sequence: MultimodalSequence
    image_tokens: np.ndarray
    kept_proposals: list[RegionProposal]
    summary: dict[str, Any]


def run_pipeline(
    cfg: RunConfig,
    image: np.ndarray,
    image_id: str = "image",
    gt_boxes: Sequence[BoundingBox] = (),
    user_boxes: Sequence[BoundingBox] = (),
    proposals: Sequence[RegionProposal] | None = None,
    instruction: str = DEFAULT_INSTRUCTION,
    grounding: bool = True,
) -> PipelineResult:
    """Run the full tokenization pipeline on one image.

    ``proposals`` overrides the synthetic backend with externally loaded
    proposals; otherwise the ground-truth boxes are jittered per config.
    """
    height, width = image.shape[0], image.shape[1]
    enc_cfg = EncoderConfig(
        patch_size=cfg.patch_size,
        depth=cfg.encoder_depth,
        dim=cfg.encoder_dim,
        seed=derive_seed(cfg.seed, "encoder"),
    )
    layers = toy_encode(image, enc_cfg)

    proposer_pyramid = build_pyramid(layers[-4:], cfg.proposer_scales)
    encoder_pyramid = build_pyramid(layers[-3:], cfg.encoder_scales)

    if proposals is None:
        proposals = synthetic_propose(
            list(gt_boxes),
            cfg.jitter,
            cfg.num_proposals,
            derive_seed(cfg.seed, "proposer"),
            image_size=(height, width),
        )
    kept = postprocess(
        proposals,
        ProposerConfig(cfg.num_proposals, cfg.score_threshold, cfg.nms_threshold, cfg.max_keep),
    )

    registry = register(
        kept,
        list(user_boxes),
        encoder_pyramid,
        (height, width),
        bins=(cfg.bins, cfg.bins),
        samples_per_bin=(cfg.samples, cfg.samples),
        seed=derive_seed(cfg.seed, "region-encoder"),
        image_id=image_id,
    )

    image_grid: TokenGrid = layers[-1]
    merged = merge_2x2(image_grid) if cfg.merge else image_grid
    image_tokens = project(merged, cfg.llm_dim, derive_seed(cfg.seed, "projector", "image"))

    prompt = render_prompt(registry, instruction, grounding)
    sequence = assemble_sequence(prompt, image_tokens, registry)

    summary = {
        "image_id": image_id,
        "image_size": [height, width],
        "merge": cfg.merge,
        "image_tokens": int(image_tokens.shape[0]),
        "region_tokens": registry.size,
        "visual_total": sequence.visual_count,
        "over_budget": sequence.over_budget,
        "proposals_in": len(proposals),
        "proposals_kept": len(kept),
        "user_regions": len(user_boxes),
        "pyramid_levels": {
            "proposer": [[lv.grid.rows, lv.grid.cols] for lv in proposer_pyramid],
            "encoder": [[lv.grid.rows, lv.grid.cols] for lv in encoder_pyramid],
        },
    }
    return PipelineResult(image_id, registry, prompt, sequence, image_tokens, list(kept), summary)


def save_pipeline_outputs(result: PipelineResult, out_dir: str | Path, save_tokens: bool = False) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry_json, registry_tokens = result.registry.save(out_dir)
    prompt_path = out_dir / "prompt.txt"
    prompt_path.write_text(result.prompt, encoding="utf-8")
    summary_path = out_dir / "summary.json"
    dump_json(result.summary, summary_path)
    written = {
        "registry": registry_json,
        "registry_tokens": registry_tokens,
        "prompt": prompt_path,
        "summary": summary_path,
    }
    if save_tokens:
        tokens_path = out_dir / "image.tokens"
        write_tokens(tokens_path, result.image_tokens)
        written["image_tokens"] = tokens_path
    return written


def load_fixture(path: str | Path) -> dict[str, Any]:
    """Read a pipeline fixture: image spec plus ground-truth and user boxes.

    Schema::

        {"image_id": "fx-1",
         "image": {"height": 448, "width": 448, "channels": 3,
                   "kind": "noise" | "constant", "seed": 0, "value": 0.5},
         "gt_boxes": [[x1, y1, x2, y2], ...],
         "user_boxes": [[x1, y1, x2, y2], ...]}
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = doc.get("image", {})
    height = int(spec.get("height", 448))
    width = int(spec.get("width", 448))
    channels = int(spec.get("channels", 3))
    kind = spec.get("kind", "noise")
    if kind == "noise":
        image = make_noise_image(height, width, channels, int(spec.get("seed", 0)))
    elif kind == "constant":
        image = make_constant_image(height, width, channels, float(spec.get("value", 0.5)))
    else:
        raise ValueError(f"unknown fixture image kind {kind!r}")
    return {
        "image_id": str(doc.get("image_id", Path(path).stem)),
        "image": image,
        "gt_boxes": [BoundingBox.from_list(b) for b in doc.get("gt_boxes", [])],
        "user_boxes": [BoundingBox.from_list(b) for b in doc.get("user_boxes", [])],
    }
