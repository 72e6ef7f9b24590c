"""Seed expansion by random walk on a fixed color/position affinity graph.

The affinity between pixels ``p`` and ``q`` within an L-inf radius ``gamma``
is a product of Gaussians in color and position::

    A[p, q] = exp(-|rgb_p - rgb_q|^2 / (2 sigma_rgb^2)
               - |xy_p - xy_q|^2 / (2 sigma_xy^2))

sharpened by an elementwise (Hadamard) power ``beta`` and row-normalized
into a transition matrix.  Seed one-hot score maps (one per class present,
plus background; IGNORE pixels start all-zero) are propagated ``t`` times
through the transpose of the transition matrix and the per-pixel argmax is
the pseudo-mask.  This is a fixed-kernel stand-in for a learned inter-pixel
affinity model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ValidationError
from .rasters import IGNORE


@dataclass(frozen=True)
class AffinityGraph:
    """Row-stochastic pixel transition matrix with its build parameters."""

    transition: sp.csr_matrix  # (h*w, h*w)
    shape: tuple[int, int]
    gamma: int
    beta: float
    sigma_rgb: float
    sigma_xy: float


def build_affinity(
    image: np.ndarray,
    gamma: int = 5,
    beta: float = 8.0,
    sigma_rgb: float = 0.2,
    sigma_xy: float = 5.0,
) -> AffinityGraph:
    """Build the sharpened, row-normalized affinity graph of an image."""
    if gamma < 1:
        raise ConfigError(f"gamma must be >= 1, got {gamma}")
    if sigma_rgb <= 0 or sigma_xy <= 0:
        raise ConfigError("bandwidths must be positive")
    pixels = np.asarray(image, dtype=float)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValidationError(f"expected (h, w, 3) image, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    n = h * w
    index = np.arange(n).reshape(h, w)

    rows_list, cols_list, data_list = [], [], []
    for dy in range(-gamma, gamma + 1):
        for dx in range(-gamma, gamma + 1):
            src_y = slice(max(0, -dy), h - max(0, dy))
            src_x = slice(max(0, -dx), w - max(0, dx))
            dst_y = slice(max(0, dy), h + min(0, dy))
            dst_x = slice(max(0, dx), w + min(0, dx))
            src = index[src_y, src_x].ravel()
            dst = index[dst_y, dst_x].ravel()
            if src.size == 0:
                continue
            color_d2 = np.sum(
                (pixels[src_y, src_x] - pixels[dst_y, dst_x]) ** 2, axis=2
            ).ravel()
            pos_d2 = float(dy * dy + dx * dx)
            affinity = np.exp(
                -color_d2 / (2.0 * sigma_rgb**2) - pos_d2 / (2.0 * sigma_xy**2)
            )
            rows_list.append(src)
            cols_list.append(dst)
            data_list.append(affinity**beta)

    matrix = sp.coo_matrix(
        (np.concatenate(data_list), (np.concatenate(rows_list), np.concatenate(cols_list))),
        shape=(n, n),
    ).tocsr()
    row_sums = np.asarray(matrix.sum(axis=1)).ravel()  # >= 1 via the self-loop
    inv = sp.diags(1.0 / row_sums)
    return AffinityGraph(
        transition=inv @ matrix,
        shape=(h, w),
        gamma=gamma,
        beta=beta,
        sigma_rgb=sigma_rgb,
        sigma_xy=sigma_xy,
    )


def random_walk_expand(
    graph: AffinityGraph,
    seeds: np.ndarray,
    labels: frozenset[int] | set[int],
    t_iters: int,
) -> np.ndarray:
    """Propagate seed scores and return the per-pixel argmax pseudo-mask.

    One score map per class in ``labels | {0}``, initialized one-hot from
    ``seeds`` (IGNORE rows all-zero), each updated as
    ``score <- transition^T score``.  Pixels whose scores are all zero stay
    IGNORE; argmax ties go to the smaller class id.
    """
    if t_iters < 0:
        raise ConfigError(f"t_iters must be nonnegative, got {t_iters}")
    h, w = graph.shape
    seeds_arr = np.asarray(seeds)
    if seeds_arr.shape != (h, w):
        raise ValidationError(f"seeds shape {seeds_arr.shape} != graph shape {(h, w)}")
    classes = sorted({0} | {int(v) for v in labels})
    allowed = set(classes) | {IGNORE}
    present = {int(v) for v in np.unique(seeds_arr)}
    if not present <= allowed:
        raise ValidationError(
            f"seed values {sorted(present - allowed)} outside labels | {{0, IGNORE}}"
        )

    flat = seeds_arr.ravel()
    scores = np.zeros((h * w, len(classes)))
    for col, class_id in enumerate(classes):
        scores[flat == class_id, col] = 1.0

    spread = graph.transition.T.tocsr()
    for _ in range(t_iters):
        scores = spread @ scores

    out = np.full(h * w, IGNORE, dtype=np.int64)
    reached = scores.sum(axis=1) > 0
    winner = np.argmax(scores, axis=1)
    class_ids = np.asarray(classes, dtype=np.int64)
    out[reached] = class_ids[winner[reached]]
    return out.reshape(h, w)
