"""The single JSON experiment config: dataset, split, and run settings.

Every field has a default mirroring the frozen acceptance benchmark, so an
empty (or absent) config file is the benchmark.  Unknown keys are rejected
rather than ignored.  A top-level ``seed`` feeds both the scene generator
and the pipeline unless they pin their own.

Schema (all keys optional)::

    {
      "seed": 7,
      "dataset_dir": "out/dataset",
      "run_dir": "out/run",
      "split": [0.8, 0.2],
      "scene": { ... scene generator fields ... },
      "run": {
        "rounds": 3, "concat_block": "block-5",
        "confounder_source": "seg_mask", "q1_control": false,
        "normalize_context": false,
        "theta_fg": 0.3, "theta_bg": 0.05,
        "gamma": 5, "beta": 8.0, "sigma_rgb": 0.2, "sigma_xy": 5.0,
        "walk_iters": 32, "evaluate": true,
        "classifier": {"epochs": ..., "batch_size": ..., "learning_rate": ...,
                        "lr_decay_pow": null, "optimizer": "adam"},
        "segmenter": { ... same fields ... }
      }
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .models import TrainConfig
from .pipeline import RunConfig
from .scenegen import SceneConfig, scene_config_from_dict, scene_config_to_dict

_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "lr_decay_pow",
               "optimizer", "seed"}
_RUN_KEYS = {
    "rounds", "concat_block", "confounder_source", "q1_control",
    "joint_projections", "warm_start", "normalize_context", "theta_fg",
    "theta_bg", "gamma", "beta", "sigma_rgb", "sigma_xy", "walk_iters",
    "classifier", "segmenter", "seed", "evaluate",
}
_TOP_KEYS = {"seed", "dataset_dir", "run_dir", "split", "scene", "run"}

# the frozen benchmark training settings
DEFAULT_CLASSIFIER_TRAIN = TrainConfig(
    epochs=100, batch_size=16, learning_rate=2e-3, optimizer="adam"
)
DEFAULT_SEGMENTER_TRAIN = TrainConfig(
    epochs=60, batch_size=16, learning_rate=3e-3, optimizer="adam"
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment settings; defaults equal the frozen benchmark."""

    seed: int
    dataset_dir: str
    run_dir: str
    split: tuple[float, float]
    scene: SceneConfig
    run: RunConfig

    def to_dict(self) -> dict:
        run = self.run
        return {
            "seed": self.seed,
            "dataset_dir": self.dataset_dir,
            "run_dir": self.run_dir,
            "split": list(self.split),
            "scene": scene_config_to_dict(self.scene),
            "run": {
                "rounds": run.rounds,
                "concat_block": run.concat_block,
                "confounder_source": run.confounder_source,
                "q1_control": run.q1_control,
                "joint_projections": run.joint_projections,
                "warm_start": run.warm_start,
                "normalize_context": run.normalize_context,
                "theta_fg": run.theta_fg,
                "theta_bg": run.theta_bg,
                "gamma": run.gamma,
                "beta": run.beta,
                "sigma_rgb": run.sigma_rgb,
                "sigma_xy": run.sigma_xy,
                "walk_iters": run.walk_iters,
                "evaluate": run.evaluate,
                "seed": run.seed,
                "classifier": _train_to_dict(run.classifier),
                "segmenter": _train_to_dict(run.segmenter),
            },
        }


def _train_to_dict(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "lr_decay_pow": cfg.lr_decay_pow,
        "optimizer": cfg.optimizer,
    }


def _train_from_dict(doc: dict, default: TrainConfig) -> TrainConfig:
    unknown = set(doc) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    merged = _train_to_dict(default)
    merged.update(doc)
    merged.pop("seed", None)  # per-round seeds are derived, not configured
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def default_experiment_config() -> ExperimentConfig:
    return ExperimentConfig(
        seed=7,
        dataset_dir="out/dataset",
        run_dir="out/run",
        split=(0.8, 0.2),
        scene=SceneConfig(),
        run=RunConfig(
            classifier=DEFAULT_CLASSIFIER_TRAIN,
            segmenter=DEFAULT_SEGMENTER_TRAIN,
        ),
    )


def load_experiment_config(
    path: str | Path | None,
    seed_override: int | None = None,
    out_override: str | Path | None = None,
) -> ExperimentConfig:
    """Read and resolve a config file; CLI overrides applied last."""
    base = default_experiment_config()
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    seed = int(doc.get("seed", base.seed))
    if seed_override is not None:
        seed = int(seed_override)

    scene_doc = dict(doc.get("scene", {}))
    scene_doc.setdefault("seed", seed)
    if seed_override is not None:
        scene_doc["seed"] = seed
    scene = scene_config_from_dict(scene_doc)

    run_doc = dict(doc.get("run", {}))
    unknown = set(run_doc) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    classifier = _train_from_dict(run_doc.pop("classifier", {}),
                                  DEFAULT_CLASSIFIER_TRAIN)
    segmenter = _train_from_dict(run_doc.pop("segmenter", {}),
                                 DEFAULT_SEGMENTER_TRAIN)
    run_doc.setdefault("seed", seed)
    if seed_override is not None:
        run_doc["seed"] = seed
    try:
        run = RunConfig(classifier=classifier, segmenter=segmenter, **run_doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    dataset_dir = str(doc.get("dataset_dir", base.dataset_dir))
    run_dir = str(doc.get("run_dir", base.run_dir))
    if out_override is not None:
        dataset_dir = str(Path(out_override) / "dataset")
        run_dir = str(Path(out_override) / "run")

    split_doc = doc.get("split", list(base.split))
    if not (isinstance(split_doc, (list, tuple)) and len(split_doc) == 2):
        raise ConfigError("split must be a [train, eval] fraction pair")

    return ExperimentConfig(
        seed=seed,
        dataset_dir=dataset_dir,
        run_dir=run_dir,
        split=(float(split_doc[0]), float(split_doc[1])),
        scene=scene,
        run=run,
    )


def smoke_experiment_config(seed: int = 7) -> ExperimentConfig:
    """A 50-image configuration for quick structural checks."""
    base = default_experiment_config()
    scene = scene_config_from_dict(
        {**scene_config_to_dict(base.scene), "n_images": 63, "seed": seed}
    )
    run = replace(
        base.run,
        seed=seed,
        walk_iters=16,
        classifier=replace(DEFAULT_CLASSIFIER_TRAIN, epochs=12),
        segmenter=replace(DEFAULT_SEGMENTER_TRAIN, epochs=12),
    )
    return replace(base, seed=seed, scene=scene, run=run)
