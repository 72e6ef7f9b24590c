"""The iterative training loop: classify, seed, expand, segment, re-estimate.

Round 0 is the baseline: the classifier trains on a zero context channel,
its CAMs are thresholded into seeds, the seeds are expanded into
pseudo-masks by random walk, and a segmenter is fitted to them.  Every
later round re-trains the classifier with the context maps derived from the
previous round's predicted masks (the class-average confounder set plus the
attention combination), then repeats the same seeding, expansion, and
segmentation steps.  This alternation is an EM-style loop: estimating the
context from the current model, then re-fitting the model under that
context.

Ground truth is touched only by evaluation code paths; with evaluation
disabled the loop runs entirely without the ``masks/`` tree.  All round
seeds derive from ``(config.seed, round, role)``, so a resumed run
reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camseed import compute_cam, threshold_seeds
from .context import (
    CONFOUNDER_SOURCES,
    ConfounderSet,
    build_confounder_set,
    compute_context_map,
)
from .errors import ConfigError, PipelineError, ValidationError
from .maskexpand import build_affinity, random_walk_expand
from .models import (
    AdaptiveContext,
    ClassifierParams,
    ClassifierSpec,
    SegParams,
    TrainConfig,
    classifier_forward_batch,
    predict_segmask_batch,
    train_classifier,
    train_segmenter,
)
from .rasters import IGNORE, Record, read_image, read_manifest, read_mask, write_mask

logger = logging.getLogger(__name__)

CONCAT_ABLATION_CHOICES = ("block-2", "block-3", "block-4", "block-5", "dense")


# ---------------------------------------------------------------------------
# mean intersection-over-union
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MiouResult:
    """Per-class IoU over the classes with a nonempty union, plus their mean."""

    per_class: dict[int, float]
    mean: float


def _iou_counts(
    pred: np.ndarray, gt: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != IGNORE
    inter = np.zeros(n_classes + 1, dtype=np.int64)
    union = np.zeros(n_classes + 1, dtype=np.int64)
    for k in range(n_classes + 1):
        p_k = (pred == k) & valid
        g_k = (gt == k) & valid
        inter[k] = np.count_nonzero(p_k & g_k)
        union[k] = np.count_nonzero(p_k | g_k)
    return inter, union


def _counts_to_result(inter: np.ndarray, union: np.ndarray) -> MiouResult:
    per_class: dict[int, float] = {}
    for k in range(inter.shape[0]):
        if union[k] > 0:
            per_class[k] = float(inter[k] / union[k])
    if not per_class:
        raise ValidationError("no class has a nonempty union; nothing to score")
    return MiouResult(per_class=per_class, mean=float(np.mean(list(per_class.values()))))


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> MiouResult:
    """Mean IoU of one mask pair; IGNORE pixels in ``gt`` are excluded."""
    return _counts_to_result(*_iou_counts(pred, gt, n_classes))


def miou_dataset(
    preds: list[np.ndarray], gts: list[np.ndarray], n_classes: int
) -> MiouResult:
    """Dataset-level mean IoU: per-class counts aggregated over all pairs."""
    if len(preds) != len(gts) or not preds:
        raise ValidationError("need equally many (and at least one) pred/gt pairs")
    inter = np.zeros(n_classes + 1, dtype=np.int64)
    union = np.zeros(n_classes + 1, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        i, u = _iou_counts(pred, gt, n_classes)
        inter += i
        union += u
    return _counts_to_result(inter, union)


# ---------------------------------------------------------------------------
# run configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Algorithmic knobs of one pipeline run."""

    rounds: int = 3
    concat_block: str = "block-5"
    confounder_source: str = "seg_mask"
    q1_control: bool = False
    joint_projections: bool = False
    warm_start: bool = True
    normalize_context: bool = False
    theta_fg: float = 0.60
    theta_bg: float = 0.05
    gamma: int = 5
    beta: float = 8.0
    sigma_rgb: float = 0.2
    sigma_xy: float = 5.0
    walk_iters: int = 32
    classifier: TrainConfig = field(default_factory=TrainConfig)
    segmenter: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 7
    evaluate: bool = True

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.confounder_source not in CONFOUNDER_SOURCES:
            raise ConfigError(
                f"confounder_source {self.confounder_source!r} not in {CONFOUNDER_SOURCES}"
            )
        if self.concat_block not in CONCAT_ABLATION_CHOICES + ("none",):
            raise ConfigError(f"concat_block {self.concat_block!r} invalid")
        if self.walk_iters < 0:
            raise ConfigError("walk_iters must be nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


def _role_seed(seed: int, round_index: int, role: str) -> int:
    role_id = {"classifier": 0, "segmenter": 1}[role]
    state = np.random.SeedSequence((seed, round_index, role_id)).generate_state(1)[0]
    return int(state)


@dataclass
class TrainingSet:
    """In-memory dataset view used by the loop (no ground truth inside)."""

    ids: list[str]
    images: np.ndarray  # (N, h, w, 3)
    label_sets: list[frozenset[int]]
    n_classes: int

    @property
    def canvas(self) -> tuple[int, int]:
        return self.images.shape[1:3]


def load_training_set(dataset_dir: str | Path, records: list[Record],
                      n_classes: int) -> TrainingSet:
    root = Path(dataset_dir)
    images = np.stack([read_image(root / r.image) for r in records])
    return TrainingSet(
        ids=[r.id for r in records],
        images=images,
        label_sets=[frozenset(r.labels) for r in records],
        n_classes=n_classes,
    )


def load_gt_masks(dataset_dir: str | Path, records: list[Record]) -> list[np.ndarray]:
    """Evaluation-only: reads the held-out mask tree."""
    root = Path(dataset_dir)
    return [read_mask(root / r.gt_mask) for r in records]


@dataclass
class PipelineState:
    """Everything one round hands to the next, plus the metric history."""

    t: int = -1  # last completed round; -1 = nothing run yet
    seg_masks: np.ndarray | None = None  # (N, h, w) predicted masks, round t
    pseudo_masks: np.ndarray | None = None
    confounders: ConfounderSet | None = None
    classifier: ClassifierParams | None = None
    segmenter: SegParams | None = None
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# one round
# ---------------------------------------------------------------------------


def _q1_channel(masks: np.ndarray, n_classes: int) -> np.ndarray:
    """Raw predicted masks as a [0, 1] channel (ids scaled by class count)."""
    return masks.astype(np.float32) / float(n_classes)


def _initial_projection(spec: ClassifierSpec, canvas: tuple[int, int],
                        seed: int) -> "ProjectionPair":
    """The projection pair a classifier run with this seed starts from."""
    from .models import ProjectionPair, _init_classifier_tensors

    tensors = _init_classifier_tensors(spec, canvas[0] * canvas[1], seed)
    return ProjectionPair(w1=tensors["proj.w1"].numpy(),
                          w2=tensors["proj.w2"].numpy())


def _training_context(
    state: PipelineState,
    config: RunConfig,
    round_index: int,
    n_classes: int,
    spec: ClassifierSpec,
    canvas: tuple[int, int],
    cls_seed: int,
    warm: ClassifierParams | None,
) -> np.ndarray | AdaptiveContext | None:
    """Context input for this round's classifier training.

    Rounds past 0 feed the previous round's predictions through the
    projection attention.  By default the maps are fixed inputs computed
    with the projections the classifier starts this round with (warm-start
    carry-over, or this round's seeded initialization), which therefore
    receive no gradient; ``joint_projections`` instead recomputes the map
    through the live projections on every step so they train with the
    classifier.
    """
    if round_index == 0:
        return None
    if state.seg_masks is None:
        raise PipelineError("previous round left no predicted masks")
    if config.q1_control:
        return _q1_channel(state.seg_masks, n_classes)
    if state.confounders is None:
        raise PipelineError("previous round left no confounder set")
    if config.joint_projections:
        fg = (state.seg_masks > 0).reshape(state.seg_masks.shape[0], -1).astype(float)
        return AdaptiveContext(
            foreground=fg,
            confounders=state.confounders.entries,
            normalize=config.normalize_context,
        )
    proj = (warm.projection if warm is not None
            else _initial_projection(spec, canvas, cls_seed))
    maps = [
        compute_context_map(state.seg_masks[i], state.confounders, proj,
                            normalize=config.normalize_context)
        for i in range(state.seg_masks.shape[0])
    ]
    return np.stack(maps).astype(np.float32)


def _inference_context_maps(
    context: np.ndarray | AdaptiveContext | None,
    state: PipelineState,
    config: RunConfig,
    params: ClassifierParams,
    n_images: int,
    canvas: tuple[int, int],
) -> np.ndarray:
    """Context maps for this round's scoring passes, matching training."""
    if context is None:
        return np.zeros((n_images, *canvas), dtype=np.float32)
    if isinstance(context, np.ndarray):
        return context
    proj = params.projection  # trained jointly; use the final matrices
    maps = [
        compute_context_map(state.seg_masks[i], state.confounders, proj,
                            normalize=config.normalize_context)
        for i in range(n_images)
    ]
    return np.stack(maps).astype(np.float32)


def run_round(
    state: PipelineState,
    config: RunConfig,
    train_set: TrainingSet,
    spec: ClassifierSpec | None = None,
) -> tuple[PipelineState, dict[str, np.ndarray]]:
    """Execute one full round and return ``(new_state, artifacts)``.

    Artifacts hold the per-image seed masks, pseudo-masks, predicted masks,
    and next-round context maps, keyed by name, all as stacked arrays in
    manifest order.  Metrics are appended by the caller (they need ground
    truth); the state is otherwise complete.
    """
    round_index = state.t + 1
    n = train_set.n_classes
    h, w = train_set.canvas
    if spec is None:
        spec = ClassifierSpec(n_classes=n, concat_block=config.concat_block)

    # classification under the current context estimate; later rounds
    # continue maximizing from the previous round's parameters by default
    cls_cfg = replace(config.classifier,
                      seed=_role_seed(config.seed, round_index, "classifier"))
    warm = state.classifier if (config.warm_start and round_index > 0) else None
    context = _training_context(state, config, round_index, n, spec, (h, w),
                                cls_cfg.seed, warm)
    params = train_classifier(train_set.images, train_set.label_sets, spec,
                              cls_cfg, context=context, init_params=warm)

    # seed areas from CAMs, expanded into pseudo-masks
    ctx_maps = _inference_context_maps(context, state, config, params,
                                       len(train_set.ids), (h, w))
    _scores, feats = classifier_forward_batch(params, train_set.images, ctx_maps)
    seeds = np.zeros((len(train_set.ids), h, w), dtype=np.int64)
    pseudo = np.zeros_like(seeds)
    for i, labels in enumerate(train_set.label_sets):
        cams = compute_cam(feats[i], params.head_weights, labels)
        seeds[i] = threshold_seeds(cams, config.theta_fg, config.theta_bg, (h, w))
        graph = build_affinity(train_set.images[i], gamma=config.gamma,
                               beta=config.beta, sigma_rgb=config.sigma_rgb,
                               sigma_xy=config.sigma_xy)
        pseudo[i] = random_walk_expand(graph, seeds[i], labels, config.walk_iters)

    # segmentation on the pseudo ground truth
    seg_cfg = replace(config.segmenter,
                      seed=_role_seed(config.seed, round_index, "segmenter"))
    segmenter = train_segmenter(train_set.images, pseudo, n, seg_cfg)
    seg_masks = predict_segmask_batch(segmenter, train_set.images)

    # context estimate for the next round
    source_masks = seg_masks if config.confounder_source == "seg_mask" else pseudo
    confounders = build_confounder_set(
        [source_masks[i] for i in range(len(train_set.ids))],
        train_set.label_sets, n, config.confounder_source,
    )
    if config.q1_control:
        next_context = _q1_channel(seg_masks, n)
    else:
        proj = params.projection
        next_context = np.stack([
            compute_context_map(seg_masks[i], confounders, proj,
                                normalize=config.normalize_context)
            for i in range(len(train_set.ids))
        ]).astype(np.float32)

    new_state = PipelineState(
        t=round_index,
        seg_masks=seg_masks,
        pseudo_masks=pseudo,
        confounders=confounders,
        classifier=params,
        segmenter=segmenter,
        history=list(state.history),
    )
    artifacts = {
        "seeds": seeds,
        "pseudo": pseudo,
        "segpred": seg_masks,
        "context": next_context,
    }
    return new_state, artifacts


# ---------------------------------------------------------------------------
# full run with checkpointing
# ---------------------------------------------------------------------------


def _round_dir(run_dir: Path, round_index: int) -> Path:
    return run_dir / "state" / f"round_{round_index}"


def _write_round(
    run_dir: Path,
    round_index: int,
    state: PipelineState,
    artifacts: dict[str, np.ndarray],
    ids: list[str],
    eval_preds: dict[str, np.ndarray],
    config: RunConfig,
) -> None:
    """Persist a completed round atomically (write to temp dir, then rename)."""
    final = _round_dir(run_dir, round_index)
    tmp = final.parent / f".tmp_round_{round_index}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for kind in ("seeds", "pseudo", "segpred"):
        (tmp / kind).mkdir()
        for i, image_id in enumerate(ids):
            write_mask(tmp / kind / f"{image_id}.png", artifacts[kind][i])
    (tmp / "context").mkdir()
    for i, image_id in enumerate(ids):
        np.save(tmp / "context" / f"{image_id}.npy",
                artifacts["context"][i].astype(np.float32))
    for image_id, pred in eval_preds.items():
        write_mask(tmp / "segpred" / f"{image_id}.png", pred)
    (tmp / "seeds" / "thresholds.json").write_text(
        json.dumps({"theta_fg": config.theta_fg, "theta_bg": config.theta_bg}) + "\n"
    )
    state.classifier.save(tmp / "classifier.bin")
    state.segmenter.save(tmp / "segmenter.bin")
    state.confounders.save(tmp / "confounders.npz")
    (tmp / "state.json").write_text(
        json.dumps(
            {"round": round_index, "history": state.history, "complete": True},
            sort_keys=True,
        )
        + "\n"
    )
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _load_checkpoint(run_dir: Path, train_set: TrainingSet) -> PipelineState:
    """Restore the newest complete round, or a fresh state if none exists."""
    state_root = run_dir / "state"
    best = -1
    if state_root.exists():
        for child in state_root.iterdir():
            if child.name.startswith("round_") and (child / "state.json").exists():
                doc = json.loads((child / "state.json").read_text())
                if doc.get("complete"):
                    best = max(best, int(doc["round"]))
    if best < 0:
        return PipelineState()
    round_dir = _round_dir(run_dir, best)
    doc = json.loads((round_dir / "state.json").read_text())
    seg_masks = np.stack(
        [read_mask(round_dir / "segpred" / f"{i}.png") for i in train_set.ids]
    )
    pseudo = np.stack(
        [read_mask(round_dir / "pseudo" / f"{i}.png") for i in train_set.ids]
    )
    return PipelineState(
        t=best,
        seg_masks=seg_masks,
        pseudo_masks=pseudo,
        confounders=ConfounderSet.load(round_dir / "confounders.npz"),
        classifier=ClassifierParams.load(round_dir / "classifier.bin"),
        segmenter=SegParams.load(round_dir / "segmenter.bin"),
        history=list(doc["history"]),
    )


def _round_metrics(
    round_index: int,
    artifacts: dict[str, np.ndarray],
    eval_preds: dict[str, np.ndarray],
    train_gt: list[np.ndarray] | None,
    eval_gt: dict[str, np.ndarray] | None,
    n_classes: int,
) -> dict:
    entry: dict = {"round": round_index}
    if train_gt is None:
        entry.update({"cam_miou": None, "pseudo_miou": None, "seg_miou": None})
        return entry
    seeds = [artifacts["seeds"][i] for i in range(len(train_gt))]
    pseudo = [artifacts["pseudo"][i] for i in range(len(train_gt))]
    entry["cam_miou"] = miou_dataset(seeds, train_gt, n_classes).mean
    entry["pseudo_miou"] = miou_dataset(pseudo, train_gt, n_classes).mean
    if eval_gt:
        preds = [eval_preds[i] for i in sorted(eval_preds)]
        gts = [eval_gt[i] for i in sorted(eval_gt)]
        entry["seg_miou"] = miou_dataset(preds, gts, n_classes).mean
    else:
        entry["seg_miou"] = None
    return entry


def run_pipeline(
    dataset_dir: str | Path,
    run_dir: str | Path,
    config: RunConfig,
    n_classes: int,
    resume: bool = False,
) -> dict:
    """Run rounds 0..T (0 is the zero-context baseline) and write a report.

    Returns the report document.  With ``resume`` the newest complete round
    checkpoint is reused; the final report is bitwise identical to an
    uninterrupted run because every round's randomness is derived from
    ``(config.seed, round)`` alone.
    """
    dataset_dir = Path(dataset_dir)
    run_dir = Path(run_dir)
    train_manifest = dataset_dir / "manifest_train.jsonl"
    eval_manifest = dataset_dir / "manifest_eval.jsonl"
    if not train_manifest.exists():
        raise ConfigError(f"missing train manifest: {train_manifest}")
    train_records = read_manifest(train_manifest)
    eval_records = read_manifest(eval_manifest) if eval_manifest.exists() else []

    train_set = load_training_set(dataset_dir, train_records, n_classes)
    eval_set = (
        load_training_set(dataset_dir, eval_records, n_classes)
        if eval_records
        else None
    )

    train_gt = load_gt_masks(dataset_dir, train_records) if config.evaluate else None
    eval_gt = (
        {r.id: m for r, m in zip(eval_records,
                                 load_gt_masks(dataset_dir, eval_records))}
        if (config.evaluate and eval_records)
        else None
    )

    run_dir.mkdir(parents=True, exist_ok=True)
    state = _load_checkpoint(run_dir, train_set) if resume else PipelineState()
    if not resume and (run_dir / "state").exists():
        shutil.rmtree(run_dir / "state")

    spec = ClassifierSpec(n_classes=n_classes, concat_block=config.concat_block)
    while state.t < config.rounds:
        round_index = state.t + 1
        logger.info("round %d: training on %d images", round_index, len(train_set.ids))
        state, artifacts = run_round(state, config, train_set, spec=spec)
        eval_preds: dict[str, np.ndarray] = {}
        if eval_set is not None:
            preds = predict_segmask_batch(state.segmenter, eval_set.images)
            eval_preds = {eval_set.ids[i]: preds[i] for i in range(len(eval_set.ids))}
        entry = _round_metrics(round_index, artifacts, eval_preds, train_gt,
                               eval_gt, n_classes)
        state.history.append(entry)
        _write_round(run_dir, round_index, state, artifacts, train_set.ids,
                     eval_preds, config)

    report = {
        "n_classes": n_classes,
        "rounds": config.rounds,
        "seed": config.seed,
        "history": state.history,
        "artifact_rounds": [
            str(_round_dir(run_dir, k).relative_to(run_dir))
            for k in range(config.rounds + 1)
        ],
    }
    (run_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    return report


def rescore_round(
    dataset_dir: str | Path, run_dir: str | Path, round_index: int, n_classes: int
) -> dict:
    """Offline re-evaluation of one round's persisted masks against truth."""
    dataset_dir = Path(dataset_dir)
    run_dir = Path(run_dir)
    round_dir = _round_dir(run_dir, round_index)
    if not round_dir.exists():
        raise ConfigError(f"no persisted round {round_index} under {run_dir}")
    train_records = read_manifest(dataset_dir / "manifest_train.jsonl")
    eval_path = dataset_dir / "manifest_eval.jsonl"
    eval_records = read_manifest(eval_path) if eval_path.exists() else []

    train_gt = load_gt_masks(dataset_dir, train_records)
    seeds = [read_mask(round_dir / "seeds" / f"{r.id}.png") for r in train_records]
    pseudo = [read_mask(round_dir / "pseudo" / f"{r.id}.png") for r in train_records]
    entry: dict = {"round": round_index}
    entry["cam_miou"] = miou_dataset(seeds, train_gt, n_classes).mean
    entry["pseudo_miou"] = miou_dataset(pseudo, train_gt, n_classes).mean
    if eval_records:
        eval_gt = load_gt_masks(dataset_dir, eval_records)
        preds = [read_mask(round_dir / "segpred" / f"{r.id}.png")
                 for r in eval_records]
        entry["seg_miou"] = miou_dataset(preds, eval_gt, n_classes).mean
    else:
        entry["seg_miou"] = None
    return entry
