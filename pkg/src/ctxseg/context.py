"""Class-average confounder sets and attention-weighted context maps.

The unobserved scene context is approximated by one average mask per class:
entry ``i`` is the mean, over training images whose label set contains class
``i``, of the binary indicator "pixel is predicted class ``i``".  The prior
over entries is uniform, ``1/n``.

An image's context map is the similarity-weighted combination of the
entries: the image's predicted foreground map and every entry are projected
into a joint space by two learned matrices, their scaled dot products are
softmaxed into attention weights ``alpha``, and the map is
``sum_i alpha_i * entry_i * (1/n)``.  The ``1/n`` prior scale is kept
literally (no renormalization), so map values live in ``[0, 1/n]``; an
optional flag rescales to peak 1 for the ablation harness.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .models import ClassifierParams, ProjectionPair, classifier_forward_batch
from .rasters import IGNORE

logger = logging.getLogger(__name__)

CONFOUNDER_SOURCES = ("seg_mask", "pseudo_mask")


@dataclass(frozen=True)
class ConfounderSet:
    """The ``n`` class-average masks, flattened, plus bookkeeping."""

    entries: np.ndarray  # (n, h*w) in [0, 1]
    canvas: tuple[int, int]
    source: str
    counts: np.ndarray  # images averaged per class

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=float)
        counts = np.asarray(self.counts, dtype=int)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "counts", counts)
        h, w = self.canvas
        if entries.ndim != 2 or entries.shape[1] != h * w:
            raise ValidationError(
                f"entries shape {entries.shape} != (n, {h * w})"
            )
        if np.any(entries < 0) or np.any(entries > 1):
            raise ValidationError("confounder entries must lie in [0, 1]")
        if self.source not in CONFOUNDER_SOURCES:
            raise ConfigError(f"source {self.source!r} not in {CONFOUNDER_SOURCES}")
        if counts.shape != (entries.shape[0],):
            raise ValidationError("counts must have one value per class")

    @property
    def n_classes(self) -> int:
        return self.entries.shape[0]

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.n_classes, 1.0 / self.n_classes)

    def save(self, path: str | Path) -> None:
        header = json.dumps(
            {
                "n": self.n_classes,
                "h": self.canvas[0],
                "w": self.canvas[1],
                "source": self.source,
                "counts": self.counts.tolist(),
            }
        )
        np.savez(
            path,
            entries=self.entries.astype(np.float32),
            header=np.array(header),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ConfounderSet":
        with np.load(path, allow_pickle=False) as doc:
            header = json.loads(str(doc["header"]))
            entries = doc["entries"].astype(float)
        return cls(
            entries=entries,
            canvas=(header["h"], header["w"]),
            source=header["source"],
            counts=np.asarray(header["counts"], dtype=int),
        )


def build_confounder_set(
    masks: list[np.ndarray],
    label_sets: list[frozenset[int] | set[int]],
    n_classes: int,
    source: str,
) -> ConfounderSet:
    """Average per-class binary indicators over the images labeled with them.

    IGNORE pixels count as "not this class" (zero).  A class no image
    carries gets an all-zero entry and a logged warning; it stays in the set
    so the class count is stable across rounds.  The reduction runs in
    manifest order, so results do not depend on any parallel schedule.
    """
    if not masks:
        raise ValidationError("empty dataset: no masks to average")
    if len(masks) != len(label_sets):
        raise ValidationError("masks and label_sets disagree on count")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValidationError("all masks must share dimensions")

    stacked = np.stack(masks)  # (N, h, w)
    entries = np.zeros((n_classes, shape[0] * shape[1]))
    counts = np.zeros(n_classes, dtype=int)
    for class_id in range(1, n_classes + 1):
        supporting = [i for i, ls in enumerate(label_sets) if class_id in ls]
        counts[class_id - 1] = len(supporting)
        if not supporting:
            logger.warning(
                "class %d appears in no image; its confounder entry is zero",
                class_id,
            )
            continue
        indicator = (stacked[supporting] == class_id).astype(float)
        entries[class_id - 1] = indicator.mean(axis=0).ravel()
    return ConfounderSet(entries=entries, canvas=shape, source=source, counts=counts)


def _foreground_vector(x_m: np.ndarray) -> np.ndarray:
    """Binary any-foreground indicator, flattened; IGNORE counts as 0."""
    arr = np.asarray(x_m)
    return ((arr > 0) & (arr != IGNORE)).astype(float).ravel()


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def context_attention(
    x_m: np.ndarray, conf: ConfounderSet, proj: ProjectionPair
) -> np.ndarray:
    """Attention over confounder entries: softmax of scaled dot similarities."""
    n = conf.n_classes
    fg = _foreground_vector(x_m)
    if proj.w1.shape != (n, fg.shape[0]):
        raise ValidationError(
            f"projection shape {proj.w1.shape} incompatible with "
            f"{n} classes and {fg.shape[0]} pixels"
        )
    u = proj.w1 @ fg  # (n,)
    v = conf.entries @ proj.w2.T  # (n, n); row i = projection of entry i
    sims = (v @ u) / np.sqrt(n)
    return _softmax(sims)


def compute_context_map(
    x_m: np.ndarray,
    conf: ConfounderSet,
    proj: ProjectionPair,
    normalize: bool = False,
) -> np.ndarray:
    """The image-specific context map ``sum_i alpha_i entry_i / n``.

    Returned reshaped to the canvas; values lie in ``[0, 1/n]`` unless
    ``normalize`` rescales the peak to 1.
    """
    alpha = context_attention(x_m, conf, proj)
    flat = (alpha / conf.n_classes) @ conf.entries
    if normalize:
        peak = flat.max()
        if peak > 0:
            flat = flat / peak
    return flat.reshape(conf.canvas)


@dataclass(frozen=True)
class NwgmForwardReport:
    """One-pass vs. n-pass context averaging, compared at probability level."""

    approx_scores: np.ndarray
    exact_probs: np.ndarray
    approx_probs: np.ndarray

    @property
    def per_class_gap(self) -> np.ndarray:
        return np.abs(self.exact_probs - self.approx_probs)

    @property
    def max_gap(self) -> float:
        return float(self.per_class_gap.max())

    def to_dict(self) -> dict:
        return {
            "approx_scores": self.approx_scores.tolist(),
            "exact_probs": self.exact_probs.tolist(),
            "approx_probs": self.approx_probs.tolist(),
            "per_class_gap": self.per_class_gap.tolist(),
            "max_gap": self.max_gap,
        }


def nwgm_forward_check(
    params: ClassifierParams,
    image: np.ndarray,
    x_m: np.ndarray,
    conf: ConfounderSet,
) -> NwgmForwardReport:
    """Diagnose the single-forward-pass approximation on one image.

    The cheap route feeds the attention-combined map
    ``sum_i alpha_i entry_i / n`` through the classifier once; the exact
    route runs one forward per entry (each scaled by the ``1/n`` prior) and
    averages the resulting sigmoid probabilities with weights ``alpha``.
    Reports per-class probability gaps; diagnostic only, no pass/fail.
    """
    proj = params.projection
    alpha = context_attention(x_m, conf, proj)
    n = conf.n_classes
    h, w = conf.canvas

    combined = ((alpha / n) @ conf.entries).reshape(h, w)
    approx_scores, _ = classifier_forward_batch(params, image[None], combined[None])
    approx_probs = 1.0 / (1.0 + np.exp(-approx_scores[0]))

    per_entry_maps = (conf.entries / n).reshape(n, h, w)
    scores, _ = classifier_forward_batch(
        params, np.repeat(image[None], n, axis=0), per_entry_maps
    )
    probs = 1.0 / (1.0 + np.exp(-scores))
    exact_probs = alpha @ probs

    return NwgmForwardReport(
        approx_scores=approx_scores[0],
        exact_probs=exact_probs,
        approx_probs=approx_probs,
    )
