"""Matplotlib figures rendered next to report files, plus the marker renderer."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalprotocols import EvalReport
from .instruct import MarkedImageSpec


def save_report_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Render the recall curve and the metric bars for an eval report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    thresholds = list(report.thresholds)
    curve = report.per_threshold or [0.0] * len(thresholds)

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(thresholds, curve, marker="o", color="#2c6fbb")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("mean recall")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(f"{report.protocol} recall vs. IoU threshold ({report.item_count} items)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    curve_path = out_dir / "recall_curve.png"
    fig.savefig(curve_path)
    plt.close(fig)
    paths.append(curve_path)

    names = ["AR", "AR@0.5", "AR@0.75"]
    values = [report.ar, report.ar_at_50, report.ar_at_75]
    for label, value in (("AR@s", report.ar_small), ("AR@m", report.ar_medium), ("AR@l", report.ar_large)):
        if value is not None:
            names.append(label)
            values.append(value)
    if report.acc_at_50 is not None:
        names.append("Acc@0.5")
        values.append(report.acc_at_50)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.bar(np.arange(len(names)), values, color="#2c6fbb")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{report.protocol} metrics")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    bars_path = out_dir / "metrics.png"
    fig.savefig(bars_path)
    plt.close(fig)
    paths.append(bars_path)
    return paths


def render_marked_image(
    spec: MarkedImageSpec,
    image_size: tuple[float, float],
    path: str | Path,
    image: np.ndarray | None = None,
    boxes: bool = True,
) -> Path:
    """Draw numbered disc markers (and optionally boxes) over the image.

    ``image`` is an optional (H, W, C) array in [0, 1]; without it the
    markers are drawn on a plain light background.
    """
    height, width = float(image_size[0]), float(image_size[1])
    fig, ax = plt.subplots(figsize=(width / 100.0, height / 100.0), dpi=100)
    if image is not None:
        ax.imshow(np.clip(image, 0.0, 1.0), extent=(0, width, height, 0))
    else:
        ax.set_facecolor("#f2f2f2")
    radius = max(width, height) / 40.0
    for marker in spec.markers:
        if boxes:
            b = marker.box
            ax.add_patch(
                plt.Rectangle((b.x_min, b.y_min), b.width, b.height, fill=False, color="#eeac00", lw=1.2)
            )
        cx, cy = marker.center
        ax.add_patch(plt.Circle((cx, cy), radius, color="#eeac00", zorder=3))
        ax.text(cx, cy, str(marker.label), color="black", ha="center", va="center", fontsize=9, zorder=4)
    ax.set_xlim(0, width)
    ax.set_ylim(height, 0)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout(pad=0.2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
