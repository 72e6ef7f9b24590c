"""Raster overlays and metric plots for inspecting a finished run."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError
from .rasters import IGNORE, read_image, read_mask, write_image

# background black, then one saturated color per class id; IGNORE mid-gray
_PALETTE = np.array(
    [
        (0.00, 0.00, 0.00),
        (0.90, 0.10, 0.10),
        (0.10, 0.80, 0.20),
        (0.15, 0.30, 0.95),
        (0.95, 0.85, 0.10),
        (0.80, 0.20, 0.80),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
        (0.55, 0.35, 0.10),
    ]
)
_IGNORE_COLOR = np.array((0.5, 0.5, 0.5))


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    """Map a class-id raster to an RGB image via the fixed palette."""
    ignore = mask == IGNORE
    ids = np.where(ignore, 0, mask) % len(_PALETTE)
    out = _PALETTE[ids]
    out[ignore] = _IGNORE_COLOR
    return out


def composite_panels(panels: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Concatenate equally sized RGB panels horizontally with white gaps."""
    h = panels[0].shape[0]
    spacer = np.ones((h, gap, 3))
    parts: list[np.ndarray] = []
    for i, panel in enumerate(panels):
        if i:
            parts.append(spacer)
        parts.append(panel)
    return np.concatenate(parts, axis=1)


def render_image_row(
    dataset_dir: str | Path,
    run_dir: str | Path,
    image_id: str,
    round_index: int,
    out_path: str | Path,
) -> Path:
    """Write image | seeds | pseudo-mask | predicted mask | truth side by side."""
    dataset_dir = Path(dataset_dir)
    run_dir = Path(run_dir)
    round_dir = run_dir / "state" / f"round_{round_index}"
    image_path = dataset_dir / "images" / f"{image_id}.png"
    if not image_path.exists():
        raise ConfigError(f"unknown image id {image_id!r}")
    if not round_dir.exists():
        raise ConfigError(f"run has no round {round_index}")

    panels = [read_image(image_path)]
    for kind in ("seeds", "pseudo", "segpred"):
        mask_path = round_dir / kind / f"{image_id}.png"
        if not mask_path.exists():
            raise ConfigError(f"round {round_index} holds no {kind} for {image_id!r}")
        panels.append(colorize_mask(read_mask(mask_path)))
    gt_path = dataset_dir / "masks" / f"{image_id}.png"
    if gt_path.exists():
        panels.append(colorize_mask(read_mask(gt_path)))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(out_path, composite_panels(panels))
    return out_path


def render_metric_plot(run_dir: str | Path, out_path: str | Path) -> Path:
    """Line plot of per-round mIoU from the run report."""
    run_dir = Path(run_dir)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise ConfigError(f"no report.json under {run_dir}")
    history = json.loads(report_path.read_text())["history"]
    rounds = [entry["round"] for entry in history]

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    for key, label in (
        ("cam_miou", "seed mask"),
        ("pseudo_miou", "pseudo-mask"),
        ("seg_miou", "predicted mask"),
    ):
        values = [entry[key] for entry in history]
        if any(v is None for v in values):
            continue
        ax.plot(rounds, values, marker="o", label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("mIoU")
    ax.set_xticks(rounds)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path
