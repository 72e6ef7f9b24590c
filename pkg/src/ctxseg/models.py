"""Trainable components: the multi-label classifier and the per-pixel segmenter.

The classifier is a five-stage convolutional network with a global-average-
pooling head and no head bias, so class scores are an exact linear function
of pooled final-stage features -- the identity that licenses class
activation maps.  An image-specific context map can be concatenated (as one
extra channel) to the input of any of stages 2..5, or all of them
("dense"), or none.  Context-channel weights are kept as separate tensors,
initialized to zero and drawn outside the main parameter initialization
stream, so that a run with a zero context map is bit-identical to a run
with no concatenation at all -- the control arm of the ablation.

Two projection matrices map a predicted foreground mask and each
class-average mask into a joint space; their scaled dot products, soft-
maxed, weight the class-average masks into the context map.  They are
ordinary parameters of the classifier and train jointly with it whenever an
adaptive context source is supplied.

Training is single-threaded and deterministic given the config seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingError, ValidationError
from .rasters import IGNORE

logger = logging.getLogger(__name__)

# training/inference determinism contract: one thread, fixed op order
torch.set_num_threads(1)

CONCAT_CHOICES = ("block-2", "block-3", "block-4", "block-5", "dense", "none")

_DEFAULT_BLOCKS = ((8, 1), (16, 2), (32, 1), (32, 2), (32, 1))


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture of the multi-label classifier.

    ``blocks`` lists ``(channels, stride)`` for the five conv stages;
    ``concat_block`` names where the context channel enters.
    """

    n_classes: int
    blocks: tuple[tuple[int, int], ...] = _DEFAULT_BLOCKS
    concat_block: str = "block-5"
    context_channels: int = 1

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")
        if len(self.blocks) != 5:
            raise ConfigError("classifier uses exactly five conv stages")
        if self.concat_block not in CONCAT_CHOICES:
            raise ConfigError(
                f"concat_block {self.concat_block!r} not in {CONCAT_CHOICES}"
            )
        if self.context_channels != 1:
            raise ConfigError("exactly one context channel is supported")

    @property
    def concat_sites(self) -> tuple[int, ...]:
        if self.concat_block == "none":
            return ()
        if self.concat_block == "dense":
            return (2, 3, 4, 5)
        return (int(self.concat_block.split("-")[1]),)

    @property
    def final_channels(self) -> int:
        return self.blocks[-1][0]


@dataclass(frozen=True)
class ProjectionPair:
    """The two learned matrices mapping masks into the similarity space."""

    w1: np.ndarray  # (n, h*w), applied to the predicted foreground map
    w2: np.ndarray  # (n, h*w), applied to each class-average mask

    def __post_init__(self) -> None:
        w1 = np.asarray(self.w1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if w1.shape != w2.shape or w1.ndim != 2:
            raise ValidationError(
                f"projection shapes {w1.shape} and {w2.shape} must match (n, h*w)"
            )
        if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
            raise ValidationError("projection matrices must be finite")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs shared by both trainable models."""

    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    lr_decay_pow: float | None = None  # polynomial decay exponent, None = constant
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size, learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay_pow is not None and self.lr_decay_pow < 0:
            raise ConfigError("lr_decay_pow must be nonnegative")


# ---------------------------------------------------------------------------
# multi-label soft-margin loss (canonical numpy form + gradient)
# ---------------------------------------------------------------------------


def _labels_to_binary(labels: Iterable[int], n: int) -> np.ndarray:
    y = np.zeros(n)
    for label in labels:
        if not 1 <= int(label) <= n:
            raise ValidationError(f"label {label} outside 1..{n}")
        y[int(label) - 1] = 1.0
    return y


def multilabel_loss(scores: np.ndarray, labels: Iterable[int]) -> float:
    """Multi-label soft-margin loss of per-class scores against a label set.

    ``sum_i [i in Y] log(1 + exp(-s_i)) + [i not in Y] log(1 + exp(s_i))``,
    i.e. the negative log of the joint probability that every present class
    fires and every absent class does not, under independent sigmoids.
    """
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    y = _labels_to_binary(labels, scores.shape[0])
    pos = np.logaddexp(0.0, -scores)
    neg = np.logaddexp(0.0, scores)
    return float(np.sum(y * pos + (1.0 - y) * neg))


def multilabel_loss_grad(scores: np.ndarray, labels: Iterable[int]) -> np.ndarray:
    """Analytic gradient of :func:`multilabel_loss` w.r.t. the scores."""
    scores = np.asarray(scores, dtype=float)
    y = _labels_to_binary(labels, scores.shape[0])
    sig = 1.0 / (1.0 + np.exp(-scores))
    return sig - y


def _torch_multilabel_loss(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch-mean of the same loss, in torch ops (for training)."""
    per_class = y * F.softplus(-scores) + (1.0 - y) * F.softplus(scores)
    return per_class.sum(dim=1).mean()


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


_CLS_FORMAT = "ctxseg-classifier-v1"
_SEG_FORMAT = "ctxseg-segmenter-v1"


@dataclass
class ClassifierParams:
    """Classifier weights plus the two context projection matrices."""

    spec: ClassifierSpec
    tensors: dict[str, torch.Tensor]
    train_losses: list[float] = field(default_factory=list)

    @property
    def head_weights(self) -> np.ndarray:
        return self.tensors["head.weight"].numpy()

    @property
    def w1(self) -> np.ndarray:
        return self.tensors["proj.w1"].numpy()

    @property
    def w2(self) -> np.ndarray:
        return self.tensors["proj.w2"].numpy()

    @property
    def projection(self) -> ProjectionPair:
        return ProjectionPair(w1=self.w1, w2=self.w2)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": _CLS_FORMAT,
                "spec": {
                    "n_classes": self.spec.n_classes,
                    "blocks": list(map(list, self.spec.blocks)),
                    "concat_block": self.spec.concat_block,
                    "context_channels": self.spec.context_channels,
                },
                "tensors": self.tensors,
                "train_losses": self.train_losses,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierParams":
        doc = torch.load(path, weights_only=True)
        if doc.get("format") != _CLS_FORMAT:
            raise ValidationError(f"{path} is not a classifier parameter file")
        spec_doc = doc["spec"]
        spec = ClassifierSpec(
            n_classes=spec_doc["n_classes"],
            blocks=tuple(tuple(b) for b in spec_doc["blocks"]),
            concat_block=spec_doc["concat_block"],
            context_channels=spec_doc["context_channels"],
        )
        return cls(spec=spec, tensors=doc["tensors"], train_losses=doc["train_losses"])


@dataclass
class SegParams:
    """Encoder-decoder segmenter weights."""

    n_classes: int
    tensors: dict[str, torch.Tensor]
    train_losses: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": _SEG_FORMAT,
                "n_classes": self.n_classes,
                "tensors": self.tensors,
                "train_losses": self.train_losses,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "SegParams":
        doc = torch.load(path, weights_only=True)
        if doc.get("format") != _SEG_FORMAT:
            raise ValidationError(f"{path} is not a segmenter parameter file")
        return cls(
            n_classes=doc["n_classes"],
            tensors=doc["tensors"],
            train_losses=doc["train_losses"],
        )


@dataclass(frozen=True)
class AdaptiveContext:
    """Inputs for context maps recomputed through the projections each step.

    ``foreground``: per-image flattened binary any-foreground maps from the
    previous round's predicted masks, shape ``(N, h*w)``.
    ``confounders``: the class-average mask matrix, shape ``(n, h*w)``.
    """

    foreground: np.ndarray
    confounders: np.ndarray
    normalize: bool = False


# ---------------------------------------------------------------------------
# classifier internals
# ---------------------------------------------------------------------------


def _init_classifier_tensors(
    spec: ClassifierSpec, hw: int, seed: int
) -> dict[str, torch.Tensor]:
    """Draw main weights in a fixed order, then zero context-channel slices.

    The draw order never depends on ``concat_block``, so specs differing
    only in the concat site share every randomly initialized tensor.
    """
    g = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    in_ch = 3
    for b, (out_ch, _stride) in enumerate(spec.blocks, start=1):
        bound = 1.0 / np.sqrt(in_ch * 9)
        tensors[f"block{b}.weight"] = torch.empty(out_ch, in_ch, 3, 3).uniform_(
            -bound, bound, generator=g
        )
        # small positive bias keeps narrow ReLU stacks from going dark
        tensors[f"block{b}.bias"] = torch.full((out_ch,), 0.01)
        in_ch = out_ch
    head_bound = 1.0 / np.sqrt(spec.final_channels)
    tensors["head.weight"] = torch.empty(spec.n_classes, spec.final_channels).uniform_(
        -head_bound, head_bound, generator=g
    )
    proj_sd = 1.0 / np.sqrt(hw)
    tensors["proj.w1"] = torch.empty(spec.n_classes, hw).normal_(
        0.0, proj_sd, generator=g
    )
    tensors["proj.w2"] = torch.empty(spec.n_classes, hw).normal_(
        0.0, proj_sd, generator=g
    )
    for b in spec.concat_sites:
        out_ch = spec.blocks[b - 1][0]
        tensors[f"block{b}.ctx_weight"] = torch.zeros(out_ch, 1, 3, 3)
    return tensors


def _classifier_features(
    spec: ClassifierSpec,
    tensors: dict[str, torch.Tensor],
    images: torch.Tensor,
    ctx: torch.Tensor | None,
) -> torch.Tensor:
    """Final-stage feature maps for a batch; ``ctx`` is ``(B,1,h,w)`` or None."""
    x = images
    sites = spec.concat_sites
    for b, (_out_ch, stride) in enumerate(spec.blocks, start=1):
        x_new = F.conv2d(x, tensors[f"block{b}.weight"], tensors[f"block{b}.bias"],
                         stride=stride, padding=1)
        if b in sites and ctx is not None:
            ctx_b = ctx
            if ctx_b.shape[-2:] != x.shape[-2:]:
                ctx_b = F.adaptive_avg_pool2d(ctx_b, x.shape[-2:])
            x_new = x_new + F.conv2d(ctx_b, tensors[f"block{b}.ctx_weight"],
                                     stride=stride, padding=1)
        x = F.relu(x_new)
    return x


def _context_maps_from_adaptive(
    ac_fg: torch.Tensor,
    ac_conf: torch.Tensor,
    w1: torch.Tensor,
    w2: torch.Tensor,
    canvas: tuple[int, int],
    normalize: bool,
) -> torch.Tensor:
    """Attention-weighted average of class masks, Eq.-for-the-context-map.

    ``ac_fg``: (B, hw) binary foreground; ``ac_conf``: (n, hw).  Returns
    (B, 1, h, w).  The uniform confounder prior 1/n scales the sum.
    """
    n = ac_conf.shape[0]
    u = ac_fg @ w1.T  # (B, n)
    v = ac_conf @ w2.T  # (n, n), row i = projection of mask i
    sims = (u @ v.T) / np.sqrt(n)
    alpha = torch.softmax(sims, dim=1)
    maps = (alpha @ ac_conf) / n  # (B, hw)
    if normalize:
        peak = maps.max(dim=1, keepdim=True).values.clamp_min(1e-12)
        maps = maps / peak
    return maps.reshape(-1, 1, *canvas)


def _images_to_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"expected (N, h, w, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _make_optimizer(cfg: TrainConfig, params: Sequence[torch.Tensor]):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)


def _poly_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_decay_pow is None:
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - step / max(total, 1)) ** cfg.lr_decay_pow


def train_classifier(
    images: np.ndarray,
    label_sets: Sequence[Iterable[int]],
    spec: ClassifierSpec,
    cfg: TrainConfig,
    context: np.ndarray | AdaptiveContext | None = None,
    init_params: ClassifierParams | None = None,
) -> ClassifierParams:
    """Fit the multi-label classifier; deterministic given ``cfg.seed``.

    ``context`` is one of: ``None`` (a zero context channel), fixed per-image
    maps ``(N, h, w)`` in ``[0, 1]``, or :class:`AdaptiveContext`, in which
    case the context map is recomputed through the projection matrices on
    every forward pass and the projections receive gradients.

    ``init_params`` warm-starts from existing weights (specs must match)
    instead of drawing a fresh initialization.
    """
    n_img = len(label_sets)
    images_t = _images_to_tensor(images)
    if images_t.shape[0] != n_img:
        raise ValidationError("images and label_sets disagree on count")
    h, w = images_t.shape[-2:]
    hw = h * w
    y = torch.from_numpy(
        np.stack([_labels_to_binary(ls, spec.n_classes) for ls in label_sets]).astype(
            np.float32
        )
    )

    fixed_ctx: torch.Tensor | None = None
    adaptive: AdaptiveContext | None = None
    if isinstance(context, AdaptiveContext):
        adaptive = context
        if context.foreground.shape != (n_img, hw):
            raise ValidationError(
                f"adaptive foreground shape {context.foreground.shape} != {(n_img, hw)}"
            )
        if context.confounders.shape[1] != hw:
            raise ValidationError("confounder vectors do not match image size")
        ac_fg = torch.from_numpy(np.asarray(context.foreground, dtype=np.float32))
        ac_conf = torch.from_numpy(np.asarray(context.confounders, dtype=np.float32))
    elif context is not None:
        ctx_arr = np.asarray(context, dtype=np.float32)
        if ctx_arr.shape != (n_img, h, w):
            raise ValidationError(
                f"context maps shape {ctx_arr.shape} != {(n_img, h, w)}"
            )
        fixed_ctx = torch.from_numpy(ctx_arr).unsqueeze(1)

    if init_params is not None:
        if init_params.spec != spec:
            raise ValidationError("warm-start parameters built for another spec")
        tensors = {name: t.clone() for name, t in init_params.tensors.items()}
    else:
        tensors = _init_classifier_tensors(spec, hw, cfg.seed)
    for t in tensors.values():
        t.requires_grad_(True)
    optimizer = _make_optimizer(cfg, list(tensors.values()))

    g = torch.Generator().manual_seed(cfg.seed + 1)
    total_steps = cfg.epochs * max(1, (n_img + cfg.batch_size - 1) // cfg.batch_size)
    step = 0
    epoch_losses: list[float] = []
    for _epoch in range(cfg.epochs):
        perm = torch.randperm(n_img, generator=g)
        running = 0.0
        for start in range(0, n_img, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = images_t[idx]
            if adaptive is not None:
                ctx = _context_maps_from_adaptive(
                    ac_fg[idx], ac_conf, tensors["proj.w1"], tensors["proj.w2"],
                    (h, w), adaptive.normalize,
                )
            elif fixed_ctx is not None:
                ctx = fixed_ctx[idx]
            else:
                ctx = torch.zeros(len(idx), 1, h, w)

            for group in optimizer.param_groups:
                group["lr"] = _poly_lr(cfg, step, total_steps)
            optimizer.zero_grad()
            feats = _classifier_features(spec, tensors, batch, ctx)
            scores = feats.mean(dim=(2, 3)) @ tensors["head.weight"].T
            loss = _torch_multilabel_loss(scores, y[idx])
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
            step += 1
        epoch_losses.append(running / n_img)

    detached = {name: t.detach().clone() for name, t in tensors.items()}
    return ClassifierParams(spec=spec, tensors=detached, train_losses=epoch_losses)


@dataclass(frozen=True)
class ForwardResult:
    """One classifier forward pass, exposing what CAM needs."""

    scores: np.ndarray  # (n,)
    block_features: np.ndarray  # (h', w', d) final-stage features
    head_weights: np.ndarray  # (n, d)


def classifier_forward(
    params: ClassifierParams,
    image: np.ndarray,
    context_map: np.ndarray | None = None,
) -> ForwardResult:
    """Score a single image; returns final features and head weights."""
    scores, feats = classifier_forward_batch(
        params,
        image[None],
        None if context_map is None else np.asarray(context_map)[None],
    )
    return ForwardResult(
        scores=scores[0], block_features=feats[0], head_weights=params.head_weights
    )


def classifier_forward_batch(
    params: ClassifierParams,
    images: np.ndarray,
    context_maps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward: returns ``(scores (B,n), features (B,h',w',d))``."""
    images_t = _images_to_tensor(images)
    h, w = images_t.shape[-2:]
    if context_maps is None:
        ctx = torch.zeros(images_t.shape[0], 1, h, w)
    else:
        ctx_arr = np.asarray(context_maps, dtype=np.float32)
        if ctx_arr.shape != (images_t.shape[0], h, w):
            raise ValidationError(
                f"context maps shape {ctx_arr.shape} != {(images_t.shape[0], h, w)}"
            )
        ctx = torch.from_numpy(ctx_arr).unsqueeze(1)
    with torch.no_grad():
        feats = _classifier_features(params.spec, params.tensors, images_t, ctx)
        scores = feats.mean(dim=(2, 3)) @ params.tensors["head.weight"].T
    return scores.numpy(), feats.permute(0, 2, 3, 1).contiguous().numpy()


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------


def _init_segmenter_tensors(n_classes: int, seed: int) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    shapes = {
        "enc1.weight": (16, 3, 3, 3),
        "enc2.weight": (32, 16, 3, 3),
        "enc3.weight": (32, 32, 3, 3),
        "dec2.weight": (32, 64, 3, 3),
        "dec1.weight": (16, 48, 3, 3),
        "out.weight": (n_classes + 1, 16, 1, 1),
    }
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in shapes.items():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = torch.empty(*shape).uniform_(-bound, bound, generator=g)
        tensors[name.replace("weight", "bias")] = torch.full((shape[0],), 0.01)
    return tensors


def _segmenter_logits(
    tensors: dict[str, torch.Tensor], images: torch.Tensor
) -> torch.Tensor:
    c = lambda x, name, stride=1, pad=1: F.conv2d(  # noqa: E731
        x, tensors[f"{name}.weight"], tensors[f"{name}.bias"], stride=stride,
        padding=pad,
    )
    e1 = F.relu(c(images, "enc1"))
    e2 = F.relu(c(e1, "enc2", stride=2))
    e3 = F.relu(c(e2, "enc3", stride=2))
    up2 = F.interpolate(e3, size=e2.shape[-2:], mode="nearest")
    d2 = F.relu(c(torch.cat([up2, e2], dim=1), "dec2"))
    up1 = F.interpolate(d2, size=e1.shape[-2:], mode="nearest")
    d1 = F.relu(c(torch.cat([up1, e1], dim=1), "dec1"))
    return c(d1, "out", pad=0)


def train_segmenter(
    images: np.ndarray,
    masks: np.ndarray,
    n_classes: int,
    cfg: TrainConfig,
) -> SegParams:
    """Fit the (n+1)-way per-pixel model on pseudo-masks; IGNORE excluded.

    Records whose mask is entirely IGNORE are skipped with a warning; if
    everything is skipped there is nothing to fit and training fails.
    """
    masks_arr = np.asarray(masks)
    usable = [i for i in range(masks_arr.shape[0]) if np.any(masks_arr[i] != IGNORE)]
    skipped = masks_arr.shape[0] - len(usable)
    if skipped:
        logger.warning("skipping %d all-IGNORE training records", skipped)
    if not usable:
        raise TrainingError("every training record is fully IGNORE")

    images_t = _images_to_tensor(np.asarray(images)[usable])
    target = torch.from_numpy(masks_arr[usable].astype(np.int64))
    n_img = images_t.shape[0]

    tensors = _init_segmenter_tensors(n_classes, cfg.seed)
    for t in tensors.values():
        t.requires_grad_(True)
    optimizer = _make_optimizer(cfg, list(tensors.values()))
    g = torch.Generator().manual_seed(cfg.seed + 1)
    total_steps = cfg.epochs * max(1, (n_img + cfg.batch_size - 1) // cfg.batch_size)
    step = 0
    epoch_losses: list[float] = []
    for _epoch in range(cfg.epochs):
        perm = torch.randperm(n_img, generator=g)
        running = 0.0
        for start in range(0, n_img, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            for group in optimizer.param_groups:
                group["lr"] = _poly_lr(cfg, step, total_steps)
            optimizer.zero_grad()
            logits = _segmenter_logits(tensors, images_t[idx])
            loss = F.cross_entropy(logits, target[idx], ignore_index=IGNORE)
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
            step += 1
        epoch_losses.append(running / n_img)

    detached = {name: t.detach().clone() for name, t in tensors.items()}
    return SegParams(n_classes=n_classes, tensors=detached, train_losses=epoch_losses)


def segment_posteriors(params: SegParams, images: np.ndarray) -> np.ndarray:
    """Per-pixel class posteriors ``(B, n+1, h, w)``."""
    images_t = _images_to_tensor(images)
    with torch.no_grad():
        logits = _segmenter_logits(params.tensors, images_t)
        return torch.softmax(logits, dim=1).numpy()


def predict_segmask_batch(params: SegParams, images: np.ndarray) -> np.ndarray:
    """Argmax masks ``(B, h, w)``; ties go to the smaller class id."""
    post = segment_posteriors(params, images)
    return np.argmax(post, axis=1).astype(np.int64)


def predict_segmask(params: SegParams, image: np.ndarray) -> np.ndarray:
    """Predicted mask for one image: values in ``{0..n}``, no IGNORE."""
    return predict_segmask_batch(params, image[None])[0]
