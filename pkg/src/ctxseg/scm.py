"""Exact inference on a small discrete structural causal model.

The graph is fixed: a context prior ``C`` influences both the input ``X``
and a mediating context representation ``M``; the outcome ``Y`` is caused
by ``X`` and ``M``::

    C --> X,   C --> M <-- X,   X --> Y <-- M

``C`` confounds ``X`` and ``Y`` through the path ``X <- C -> M -> Y``, so the
observational conditional ``P(Y | X=x)`` generally differs from the
interventional distribution ``P(Y | do(X=x))``.  Because every variable is
finite and small (cardinalities capped at 8), both quantities -- and the
backdoor-adjustment estimate of the latter -- can be computed by exact
enumeration, which is what this module provides.  It exists so that the
adjustment formula used by the image pipeline can be validated against
ground truth with no estimation error in the way.

All operations are pure functions of their inputs and hold no shared
mutable state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    NullEventError,
    PositivityError,
    UnsupportedModelError,
    ValidationError,
)

MAX_CARDINALITY = 8

_ROW_ATOL = 1e-12
_DIST_ATOL = 1e-10


def _check_stochastic(name: str, table: np.ndarray, atol: float = _ROW_ATOL) -> None:
    """Validate that the last axis of ``table`` holds probability rows."""
    if np.any(table < 0):
        idx = np.argwhere(np.atleast_1d(table) < 0)[0]
        raise ValidationError(f"{name} entry {tuple(idx)} is negative")
    sums = np.atleast_1d(table.sum(axis=-1))
    bad = np.argwhere(np.abs(sums - 1.0) > atol)
    if bad.size:
        row = tuple(int(i) for i in bad[0])
        raise ValidationError(
            f"{name} row {row} sums to {sums[tuple(bad[0])]:.17g}, expected 1"
        )


@dataclass(frozen=True)
class DistTable:
    """A validated probability distribution over one variable's outcomes."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValidationError("DistTable must be one-dimensional")
        if np.any(values < -_DIST_ATOL) or np.any(values > 1 + _DIST_ATOL):
            raise ValidationError("DistTable entries must lie in [0, 1]")
        if abs(float(values.sum()) - 1.0) > _DIST_ATOL:
            raise ValidationError(
                f"DistTable sums to {values.sum():.17g}, expected 1"
            )
        # rounding at the 1e-16 level may leave entries a hair outside [0, 1]
        object.__setattr__(self, "values", np.clip(values, 0.0, 1.0))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DiscreteSCM:
    """CPT parameterization of the fixed four-variable graph.

    Parameters
    ----------
    p_c:
        Prior over contexts, shape ``(C,)``.
    p_x_given_c:
        Row-stochastic table ``P(X=x | C=c)``, shape ``(C, X)``.
    p_m_given_xc:
        Row-stochastic table ``P(M=m | X=x, C=c)``, shape ``(X, C, M)``.
    p_y_given_xm:
        Row-stochastic table ``P(Y=y | X=x, M=m)``, shape ``(X, M, Y)``.
    f:
        Optional deterministic context mechanism, shape ``(X, C)``, mapping
        ``(x, c)`` to the context representation ``m = f[x, c]``.  When
        present, ``p_m_given_xc`` must be the matching 0/1 table.
    """

    p_c: np.ndarray
    p_x_given_c: np.ndarray
    p_m_given_xc: np.ndarray
    p_y_given_xm: np.ndarray
    f: np.ndarray | None = None

    def __post_init__(self) -> None:
        p_c = np.asarray(self.p_c, dtype=float)
        p_xc = np.asarray(self.p_x_given_c, dtype=float)
        p_mxc = np.asarray(self.p_m_given_xc, dtype=float)
        p_yxm = np.asarray(self.p_y_given_xm, dtype=float)
        f = None if self.f is None else np.asarray(self.f, dtype=int)
        for name, value in (
            ("p_c", p_c),
            ("p_x_given_c", p_xc),
            ("p_m_given_xc", p_mxc),
            ("p_y_given_xm", p_yxm),
            ("f", f),
        ):
            object.__setattr__(self, name, value)

        if p_c.ndim != 1 or p_xc.ndim != 2 or p_mxc.ndim != 3 or p_yxm.ndim != 3:
            raise ValidationError("CPT tables have wrong rank")
        c, x, m, y = self.cards
        if max(c, x, m, y) > MAX_CARDINALITY:
            raise ValidationError(
                f"cardinalities {self.cards} exceed the cap of {MAX_CARDINALITY}"
            )
        if p_xc.shape != (c, x):
            raise ValidationError(f"p_x_given_c shape {p_xc.shape} != {(c, x)}")
        if p_mxc.shape != (x, c, m):
            raise ValidationError(f"p_m_given_xc shape {p_mxc.shape} != {(x, c, m)}")
        if p_yxm.shape != (x, m, y):
            raise ValidationError(f"p_y_given_xm shape {p_yxm.shape} != {(x, m, y)}")

        _check_stochastic("p_c", p_c)
        _check_stochastic("p_x_given_c", p_xc)
        _check_stochastic("p_m_given_xc", p_mxc)
        _check_stochastic("p_y_given_xm", p_yxm)

        if f is not None:
            if f.shape != (x, c):
                raise ValidationError(f"f shape {f.shape} != {(x, c)}")
            if np.any(f < 0) or np.any(f >= m):
                raise ValidationError("f maps outside the outcome space of M")
            expected = np.zeros_like(p_mxc)
            xs, cs = np.meshgrid(np.arange(x), np.arange(c), indexing="ij")
            expected[xs, cs, f] = 1.0
            if not np.array_equal(p_mxc, expected):
                raise ValidationError(
                    "p_m_given_xc is not the 0/1 table induced by f"
                )

    @property
    def cards(self) -> tuple[int, int, int, int]:
        """Cardinalities ``(C, X, M, Y)``."""
        return (
            self.p_c.shape[0],
            self.p_x_given_c.shape[1],
            self.p_m_given_xc.shape[2],
            self.p_y_given_xm.shape[2],
        )

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "cards": list(self.cards),
            "p_c": self.p_c.tolist(),
            "p_x_given_c": self.p_x_given_c.tolist(),
            "p_m_given_xc": self.p_m_given_xc.tolist(),
            "p_y_given_xm": self.p_y_given_xm.tolist(),
        }
        if self.f is not None:
            doc["f"] = self.f.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteSCM":
        try:
            scm = cls(
                p_c=np.array(doc["p_c"], dtype=float),
                p_x_given_c=np.array(doc["p_x_given_c"], dtype=float),
                p_m_given_xc=np.array(doc["p_m_given_xc"], dtype=float),
                p_y_given_xm=np.array(doc["p_y_given_xm"], dtype=float),
                f=np.array(doc["f"], dtype=int) if "f" in doc else None,
            )
        except KeyError as exc:
            raise ValidationError(f"SCM document missing field {exc}") from exc
        if "cards" in doc and tuple(doc["cards"]) != scm.cards:
            raise ValidationError(
                f"declared cards {doc['cards']} != table cards {list(scm.cards)}"
            )
        return scm

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "DiscreteSCM":
        return cls.from_dict(json.loads(Path(path).read_text()))


def joint_table(scm: DiscreteSCM) -> np.ndarray:
    """Full joint ``P(c, x, m, y)`` as a ``(C, X, M, Y)`` array.

    Factorizes along the graph:
    ``P(c) P(x|c) P(m|x,c) P(y|x,m)``.
    """
    return np.einsum(
        "c,cx,xcm,xmy->cxmy",
        scm.p_c,
        scm.p_x_given_c,
        scm.p_m_given_xc,
        scm.p_y_given_xm,
    )


def observe(scm: DiscreteSCM, x: int) -> DistTable:
    """Observational conditional ``P(Y | X=x)``, confounding included."""
    joint = joint_table(scm)
    slab = joint[:, x, :, :]  # (C, M, Y)
    p_x = slab.sum()
    if p_x <= 0:
        raise NullEventError(f"P(X={x}) = 0; cannot condition on a null event")
    return DistTable(slab.sum(axis=(0, 1)) / p_x)


def intervene(scm: DiscreteSCM, x: int) -> DistTable:
    """Interventional distribution ``P(Y | do(X=x))`` by truncated factorization.

    Setting ``X = x`` severs the ``C -> X`` edge, so the intervened joint
    drops the ``P(x|c)`` factor::

        P(y | do(x)) = sum_{c,m} P(c) P(m|x,c) P(y|x,m)

    No positivity of ``P(X=x)`` is required: the intervention sets ``x``.
    """
    values = np.einsum(
        "c,cm,my->y",
        scm.p_c,
        scm.p_m_given_xc[x],
        scm.p_y_given_xm[x],
    )
    return DistTable(values)


def backdoor_adjustment(scm: DiscreteSCM, x: int) -> DistTable:
    """Backdoor-adjusted estimate of ``P(Y | do(X=x))`` from observational terms.

    Stratifies over the context prior::

        sum_c P(Y | X=x, M=f(x,c)) P(c)

    where ``P(Y | X=x, M=m)`` is the observational conditional computed from
    the model's own joint.  Requires the deterministic context mechanism
    ``f`` and positivity of every stratum ``(x, f(x,c))`` actually used
    (``P(c) > 0``); a zero-probability stratum leaves the conditional
    undefined, so it raises instead of renormalizing.
    """
    if scm.f is None:
        raise UnsupportedModelError(
            "backdoor adjustment needs the deterministic context mechanism f"
        )
    joint = joint_table(scm)
    p_xmy = joint.sum(axis=0)  # (X, M, Y), joint of (x, m, y)
    p_xm = p_xmy.sum(axis=-1)  # (X, M)
    n_y = scm.cards[3]
    values = np.zeros(n_y)
    for c, p_c in enumerate(scm.p_c):
        if p_c <= 0:
            continue
        m = int(scm.f[x, c])
        if p_xm[x, m] <= 0:
            raise PositivityError(
                f"P(X={x}, M=f({x},{c})={m}) = 0; adjustment undefined at (x={x}, c={c})"
            )
        values += p_c * p_xmy[x, m] / p_xm[x, m]
    return DistTable(values)


@dataclass(frozen=True)
class AdjustmentReport:
    """Worst-case disagreement between the adjustment formula and the truth."""

    max_abs_gap: float
    passed: bool
    tolerance: float = 1e-10

    def to_dict(self) -> dict:
        return {
            "max_abs_gap": self.max_abs_gap,
            "pass": self.passed,
            "tolerance": self.tolerance,
        }


def verify_backdoor_identity(
    scm: DiscreteSCM, tolerance: float = 1e-10
) -> AdjustmentReport:
    """Check ``backdoor_adjustment == intervene`` over every ``(x, y)``.

    With a deterministic context mechanism and positivity, the two are
    algebraically identical; this enumerates the gap and reports its max.
    """
    n_x = scm.cards[1]
    gap = 0.0
    for x in range(n_x):
        adjusted = backdoor_adjustment(scm, x).values
        truth = intervene(scm, x).values
        gap = max(gap, float(np.max(np.abs(adjusted - truth))))
    return AdjustmentReport(max_abs_gap=gap, passed=gap <= tolerance, tolerance=tolerance)


def tv_distance(p: DistTable, q: DistTable) -> float:
    """Total-variation distance between two distributions on one space."""
    return 0.5 * float(np.abs(p.values - q.values).sum())


def confounding_gap(scm: DiscreteSCM) -> float:
    """``max_x TV(P(Y|X=x), P(Y|do(X=x)))`` -- how misleading observation is."""
    n_x = scm.cards[1]
    return max(tv_distance(observe(scm, x), intervene(scm, x)) for x in range(n_x))


@dataclass(frozen=True)
class NwgmReport:
    """Exact expectation of a sigmoid vs. the sigmoid of the expectation."""

    exact: float
    approx: float

    @property
    def gap(self) -> float:
        return abs(self.exact - self.approx)

    def to_dict(self) -> dict:
        return {"exact": self.exact, "approx": self.approx, "gap": self.gap}


def _sigmoid(t: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(t, dtype=float)))


def nwgm_gap(scores: np.ndarray, prior: DistTable) -> NwgmReport:
    """Gap of the normalized-weighted-geometric-mean approximation.

    For per-context positive scores ``s[c]`` (the negative-branch score fixed
    at 0) the exact context-averaged probability is
    ``sum_c sigmoid(s[c]) P(c)``; the NWGM shortcut moves the expectation
    inside, giving ``sigmoid(sum_c s[c] P(c))``.  Both lie in ``[0, 1]``; the
    report records their absolute difference.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(prior),):
        raise ValidationError(
            f"scores shape {scores.shape} does not match prior of length {len(prior)}"
        )
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    exact = float(np.sum(_sigmoid(scores) * prior.values))
    approx = float(_sigmoid(float(np.sum(scores * prior.values))))
    return NwgmReport(exact=exact, approx=approx)


def random_scm(
    rng: np.random.Generator,
    cards: tuple[int, int, int, int],
    deterministic_context: bool = False,
) -> DiscreteSCM:
    """Draw a random SCM with full-support CPTs (Dirichlet rows).

    With ``deterministic_context`` the ``M`` mechanism is a random function
    of ``(x, c)`` and its CPT the induced 0/1 table, which is the regime the
    backdoor identity is stated for.  Full support of ``p_c`` and
    ``p_x_given_c`` then guarantees positivity of every stratum the
    adjustment touches.
    """
    c, x, m, y = cards
    p_c = rng.dirichlet(np.ones(c))
    p_xc = rng.dirichlet(np.ones(x), size=c)
    p_yxm = rng.dirichlet(np.ones(y), size=(x, m))
    if deterministic_context:
        f = rng.integers(0, m, size=(x, c))
        p_mxc = np.zeros((x, c, m))
        xs, cs = np.meshgrid(np.arange(x), np.arange(c), indexing="ij")
        p_mxc[xs, cs, f] = 1.0
    else:
        f = None
        p_mxc = rng.dirichlet(np.ones(m), size=(x, c))
    return DiscreteSCM(
        p_c=p_c, p_x_given_c=p_xc, p_m_given_xc=p_mxc, p_y_given_xm=p_yxm, f=f
    )


def example_confounded_scm() -> DiscreteSCM:
    """A binary SCM where observation and intervention disagree strongly.

    The context drives both the input (``P(X=c|c) = 0.95``) and, through the
    deterministic representation ``m = f(x, c) = c``, the outcome
    (``P(Y=1|x, m)`` is 0.9-ish for ``m=1`` and 0.1-ish for ``m=0``).
    Observing ``X=1`` makes ``C=1`` overwhelmingly likely, so
    ``P(Y=1|X=1)`` is near 0.9, while under ``do(X=1)`` the context stays at
    its 50/50 prior and the probability drops toward 0.5.  The
    total-variation gap exceeds 0.3, a frozen demonstration that the
    co-occurrence prior alone can manufacture strong spurious correlation.
    """
    p_c = np.array([0.5, 0.5])
    p_x_given_c = np.array([[0.95, 0.05], [0.05, 0.95]])
    f = np.array([[0, 1], [0, 1]])  # m = c for either x
    p_m_given_xc = np.zeros((2, 2, 2))
    xs, cs = np.meshgrid(np.arange(2), np.arange(2), indexing="ij")
    p_m_given_xc[xs, cs, f] = 1.0
    p_y_given_xm = np.array(
        [
            [[0.90, 0.10], [0.10, 0.90]],  # x = 0: rows m = 0, 1
            [[0.85, 0.15], [0.05, 0.95]],  # x = 1
        ]
    )
    return DiscreteSCM(
        p_c=p_c,
        p_x_given_c=p_x_given_c,
        p_m_given_xc=p_m_given_xc,
        p_y_given_xm=p_y_given_xm,
        f=f,
    )
