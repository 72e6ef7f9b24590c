"""Class activation maps and their thresholding into seed masks.

A CAM for class ``i`` is the ReLU of the final feature maps contracted with
row ``i`` of the GAP head, max-normalized per class.  Seeding keeps the
confident core: a pixel becomes the argmax class where that class's value
clears the foreground threshold, background where every class is below the
background threshold, and IGNORE in between -- the undecided band the
random walk fills in later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .rasters import IGNORE


@dataclass(frozen=True)
class CamStack:
    """Per-class activation maps in ``[0, 1]``; absent classes are all-zero."""

    maps: np.ndarray  # (n, h', w')
    present_classes: frozenset[int]

    @property
    def n_classes(self) -> int:
        return self.maps.shape[0]


def compute_cam(
    block_features: np.ndarray,
    head_weights: np.ndarray,
    labels: frozenset[int] | set[int],
) -> CamStack:
    """Build the normalized activation stack for one image.

    ``block_features`` is ``(h', w', d)``, ``head_weights`` ``(n, d)``.
    Classes outside ``labels`` get all-zero maps; present classes with any
    positive activation are scaled to peak at 1.
    """
    feats = np.asarray(block_features, dtype=float)
    weights = np.asarray(head_weights, dtype=float)
    if feats.ndim != 3 or weights.ndim != 2 or feats.shape[2] != weights.shape[1]:
        raise ValidationError(
            f"feature shape {feats.shape} incompatible with head {weights.shape}"
        )
    n = weights.shape[0]
    for label in labels:
        if not 1 <= label <= n:
            raise ValidationError(f"label {label} outside 1..{n}")
    raw = np.einsum("hwd,nd->nhw", feats, weights)
    raw = np.maximum(raw, 0.0)
    maps = np.zeros_like(raw)
    for label in labels:
        peak = raw[label - 1].max()
        if peak > 0:
            maps[label - 1] = raw[label - 1] / peak
    return CamStack(maps=maps, present_classes=frozenset(labels))


def _upsample_nearest(map2d: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    h_in, w_in = map2d.shape
    h_out, w_out = out_size
    rows = (np.arange(h_out) * h_in) // h_out
    cols = (np.arange(w_out) * w_in) // w_out
    return map2d[np.ix_(rows, cols)]


def threshold_seeds(
    cams: CamStack,
    theta_fg: float,
    theta_bg: float,
    out_size: tuple[int, int],
) -> np.ndarray:
    """Threshold an activation stack into a seed mask at ``out_size``.

    Maps are upsampled by nearest neighbor first.  Ties in the per-pixel
    argmax go to the smaller class id.  Requires ``0 < theta_bg < theta_fg < 1``.
    """
    if not (0.0 < theta_bg < theta_fg < 1.0):
        raise ConfigError(
            f"need 0 < theta_bg < theta_fg < 1, got bg={theta_bg}, fg={theta_fg}"
        )
    stack = np.stack(
        [_upsample_nearest(m, out_size) for m in cams.maps], axis=0
    )  # (n, h, w)
    best = np.argmax(stack, axis=0)  # first max -> smaller class id
    best_val = np.max(stack, axis=0)
    seeds = np.full(out_size, IGNORE, dtype=np.int64)
    seeds[best_val <= theta_bg] = 0
    fg = best_val >= theta_fg
    seeds[fg] = best[fg] + 1
    return seeds
