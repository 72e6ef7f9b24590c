"""Ablation harness: one axis at a time, shared seed, shared baseline row.

Axes mirror the four study questions the round loop exposes:

* ``q1`` -- replace the learned context map by the raw predicted mask
  (is the attention-combined map actually doing the work?)
* ``rounds`` -- per-round metrics 1..4 of a single run (how many rounds?)
* ``block`` -- concat site block-2..block-5 and dense (where to inject?)
* ``confounder_source`` -- class averages from predicted vs. pseudo masks.

Every arm runs with the same seed.  Round 0 trains on a zero context
channel whose weights are zero-initialized, so its metrics are identical
across arms; the grid therefore carries a single shared baseline row
(asserted, not assumed).
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, PipelineError
from .pipeline import RunConfig, run_pipeline

AXES = ("rounds", "block", "confounder_source", "q1")

_METRIC_KEYS = ("cam_miou", "pseudo_miou", "seg_miou")


def _arm_configs(axis: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis == "rounds":
        return [("rounds", replace(base, rounds=4))]
    if axis == "block":
        return [
            (name, replace(base, concat_block=name))
            for name in ("block-2", "block-3", "block-4", "block-5", "dense")
        ]
    if axis == "confounder_source":
        return [
            (name, replace(base, confounder_source=name))
            for name in ("pseudo_mask", "seg_mask")
        ]
    if axis == "q1":
        return [("seg-mask-context", replace(base, q1_control=True))]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _metrics_row(entry: dict) -> dict:
    return {key: entry[key] for key in _METRIC_KEYS}


def run_ablation(
    axis: str,
    dataset_dir: str | Path,
    out_dir: str | Path,
    base: RunConfig,
    n_classes: int,
) -> dict:
    """Run one axis's arms and assemble the metric grid."""
    out_dir = Path(out_dir)
    arms = _arm_configs(axis, base)
    baseline: dict | None = None
    rows = []
    for name, config in arms:
        run_dir = out_dir / f"arm_{name.replace('-', '_')}"
        report = run_pipeline(dataset_dir, run_dir, config, n_classes=n_classes)
        history = report["history"]
        arm_baseline = _metrics_row(history[0])
        if baseline is None:
            baseline = arm_baseline
        elif arm_baseline != baseline:
            raise PipelineError(
                f"arm {name!r} disagrees with the shared round-0 baseline"
            )
        if axis == "rounds":
            for entry in history[1:]:
                rows.append({"arm": f"round-{entry['round']}",
                             **_metrics_row(entry)})
        else:
            rows.append({"arm": name, **_metrics_row(history[-1])})
    return {"axis": axis, "baseline": baseline, "rows": rows}


def format_grid(grid: dict) -> str:
    """Plain-text table of an ablation grid."""
    header = f"axis: {grid['axis']}"
    col_names = ("arm", "cam", "pseudo", "seg")
    width = max(12, max(len(r["arm"]) for r in grid["rows"]) + 2)

    def fmt(value) -> str:
        return "--" if value is None else f"{value:.4f}"

    lines = [header]
    lines.append(
        f"{col_names[0]:<{width}}{col_names[1]:>8}{col_names[2]:>8}{col_names[3]:>8}"
    )
    base = grid["baseline"]
    lines.append(
        f"{'baseline':<{width}}{fmt(base['cam_miou']):>8}"
        f"{fmt(base['pseudo_miou']):>8}{fmt(base['seg_miou']):>8}"
    )
    for row in grid["rows"]:
        lines.append(
            f"{row['arm']:<{width}}{fmt(row['cam_miou']):>8}"
            f"{fmt(row['pseudo_miou']):>8}{fmt(row['seg_miou']):>8}"
        )
    return "\n".join(lines)


def save_grid(grid: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid, sort_keys=True, indent=2) + "\n")
