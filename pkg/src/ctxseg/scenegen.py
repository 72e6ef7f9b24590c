"""Deterministic generator of synthetic multi-object scenes with a
controllable class co-occurrence confound.

Each image is drawn by a pure function of ``(config, image_index)``:

1. A latent context id ``k`` is sampled uniformly.  It picks the background
   texture, so the context is visible to any classifier that cares to look.
2. Class presence starts as independent Bernoulli(``base_rate``) draws.  The
   confound knob ``confound_strength`` (rho) then (a) ties class ``k`` to its
   own context with probability rho and (b) transitively pulls in
   co-occurrence partners ``j`` of every present class ``i`` with probability
   ``rho * cooccurrence[i, j]``.  At rho=0 presence is independent of both
   the context and the other classes; at rho=1 a unit co-occurrence entry is
   a hard implication.
3. Present classes are rendered as colored shapes in a random z-order; a
   pixel belongs to the topmost shape.  Placement retries keep every shape
   at least partially visible, so the label set always equals the set of
   class ids present in the ground-truth mask.

Ground-truth masks are written to a separate ``masks/`` tree that training
code never reads; they exist only for evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PlacementError
from .rasters import Record, write_image, write_manifest, write_mask

_MIN_VISIBLE = 6  # pixels a shape must keep after occlusion
_MAX_PLACEMENT_TRIES = 40

SHAPE_KINDS = ("disc", "triangle", "bar", "ring")
BACKGROUND_KINDS = ("gradient", "stripes", "checker", "speckle")


@dataclass(frozen=True)
class ShapeSpec:
    """Per-class shape family: geometry kind, size range (px), base color."""

    kind: str
    size_range: tuple[float, float]
    color: tuple[float, float, float]
    color_jitter: float = 0.08

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad size_range {self.size_range}")


@dataclass(frozen=True)
class BackgroundStyle:
    """A textured fill; the style index is the visible face of the context."""

    kind: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    period: float = 6.0

    def __post_init__(self) -> None:
        if self.kind not in BACKGROUND_KINDS:
            raise ConfigError(f"unknown background kind {self.kind!r}")


def _default_shapes(n: int) -> tuple[ShapeSpec, ...]:
    palette = [
        (0.88, 0.20, 0.20),
        (0.18, 0.75, 0.25),
        (0.25, 0.35, 0.90),
        (0.90, 0.82, 0.15),
        (0.80, 0.25, 0.80),
        (0.15, 0.80, 0.80),
        (0.95, 0.55, 0.15),
        (0.55, 0.30, 0.10),
    ]
    kinds = ["disc", "bar", "triangle", "ring"]
    return tuple(
        ShapeSpec(kind=kinds[i % 4], size_range=(4.0, 7.0), color=palette[i % 8])
        for i in range(n)
    )


def _default_backgrounds() -> tuple[BackgroundStyle, ...]:
    return (
        BackgroundStyle("gradient", (0.25, 0.25, 0.28), (0.55, 0.55, 0.58)),
        BackgroundStyle("stripes", (0.45, 0.38, 0.28), (0.60, 0.52, 0.40), period=5.0),
        BackgroundStyle("checker", (0.30, 0.38, 0.44), (0.46, 0.54, 0.60), period=4.0),
        BackgroundStyle("speckle", (0.36, 0.44, 0.34), (0.52, 0.60, 0.50)),
    )


def _default_placement(n: int) -> np.ndarray:
    # class i leans toward quadrant i (mod 4); never exclusively, so the
    # placement prior is a tendency the pipeline can learn, not a rule
    prior = np.full((n, 4), 0.1)
    for i in range(n):
        prior[i, i % 4] = 0.7
    return prior / prior.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SceneConfig:
    """Everything the generator needs; identical configs give identical bytes."""

    n_classes: int = 4
    canvas: tuple[int, int] = (32, 32)
    cooccurrence: np.ndarray | None = None
    confound_strength: float = 0.9
    base_rate: float = 0.35
    placement_prior: np.ndarray | None = None
    shape_library: tuple[ShapeSpec, ...] = ()
    background_styles: tuple[BackgroundStyle, ...] = field(
        default_factory=_default_backgrounds
    )
    n_images: int = 250
    seed: int = 7

    def __post_init__(self) -> None:
        n = self.n_classes
        if n < 2:
            raise ConfigError("n_classes must be at least 2")
        h, w = self.canvas
        if h < 16 or w < 16:
            raise ConfigError(f"canvas {self.canvas} is below the 16x16 minimum")
        if self.n_images < 1:
            raise ConfigError("n_images must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not 0.0 <= self.confound_strength <= 1.0:
            raise ConfigError(
                f"confound_strength {self.confound_strength} outside [0, 1]"
            )
        if not 0.0 < self.base_rate <= 1.0:
            raise ConfigError(f"base_rate {self.base_rate} outside (0, 1]")

        cooc = self.cooccurrence
        if cooc is None:
            cooc = default_cooccurrence(n)
        cooc = np.asarray(cooc, dtype=float)
        if cooc.shape != (n, n):
            raise ConfigError(f"cooccurrence shape {cooc.shape} != {(n, n)}")
        if np.any(cooc < 0) or np.any(cooc > 1):
            raise ConfigError("cooccurrence entries must lie in [0, 1]")
        if not np.allclose(np.diag(cooc), 1.0, atol=0):
            raise ConfigError("cooccurrence diagonal must equal 1")
        object.__setattr__(self, "cooccurrence", cooc)

        prior = self.placement_prior
        if prior is None:
            prior = _default_placement(n)
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (n, 4):
            raise ConfigError(
                f"placement_prior shape {prior.shape} != {(n, 4)} (quadrant regions)"
            )
        if np.any(prior < 0) or np.any(np.abs(prior.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("placement_prior rows must be distributions")
        object.__setattr__(self, "placement_prior", prior)

        shapes = self.shape_library or _default_shapes(n)
        if len(shapes) != n:
            raise ConfigError(f"shape_library needs {n} entries, got {len(shapes)}")
        object.__setattr__(self, "shape_library", tuple(shapes))
        if not self.background_styles:
            raise ConfigError("at least one background style is required")


def default_cooccurrence(n: int, pair: tuple[int, int] = (1, 2), strong: float = 0.9,
                         weak: float = 0.15) -> np.ndarray:
    """Identity-diagonal matrix with one strongly confounded class pair."""
    cooc = np.full((n, n), weak)
    np.fill_diagonal(cooc, 1.0)
    i, j = pair[0] - 1, pair[1] - 1
    cooc[i, j] = cooc[j, i] = strong
    return cooc


@dataclass(frozen=True)
class LabeledImage:
    """A rendered scene: pixels, image-level labels, held-out truth."""

    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    labels: frozenset[int]
    gt_mask: np.ndarray  # (h, w) ints in {0..n}


def _image_rng(config: SceneConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, index])


def sample_labels(rng: np.random.Generator, config: SceneConfig) -> tuple[int, np.ndarray]:
    """Sample ``(context_id, presence)`` for one scene.

    ``presence`` is a boolean vector over classes ``1..n`` (index ``i`` is
    class ``i+1``).  See the module docstring for the three-stage scheme.
    """
    n = config.n_classes
    rho = config.confound_strength
    context = int(rng.integers(n))

    presence = rng.random(n) < config.base_rate
    if rng.random() < rho:
        presence[context] = True

    # transitive co-occurrence closure: newly added classes pull in their
    # own partners, so a unit entry is a hard implication at rho = 1
    queue = [i for i in range(n) if presence[i]]
    while queue:
        i = queue.pop(0)
        for j in range(n):
            if j == i or presence[j]:
                continue
            if rng.random() < rho * config.cooccurrence[i, j]:
                presence[j] = True
                queue.append(j)

    if not presence.any():
        presence[int(rng.integers(n))] = True
    return context, presence


def _quadrant_bounds(h: int, w: int, region: int) -> tuple[int, int, int, int]:
    y0 = 0 if region < 2 else h // 2
    x0 = 0 if region % 2 == 0 else w // 2
    return y0, y0 + h // 2, x0, x0 + w // 2


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, size: float,
                angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= size * size
    if kind == "ring":
        d2 = dy * dy + dx * dx
        inner = 0.55 * size
        return (d2 <= size * size) & (d2 >= inner * inner)
    if kind == "bar":
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        u = cos_a * dx + sin_a * dy
        v = -sin_a * dx + cos_a * dy
        return (np.abs(u) <= 1.3 * size) & (np.abs(v) <= 0.42 * size)
    if kind == "triangle":
        # apex up: base 2*size wide at cy+size, apex at cy-size
        return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (dy + size) / 2.0)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _render_background(style: BackgroundStyle, h: int, w: int,
                       rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    a = np.asarray(style.color_a)
    b = np.asarray(style.color_b)
    if style.kind == "gradient":
        t = (xx / max(w - 1, 1))[..., None]
    elif style.kind == "stripes":
        t = (((yy + xx) // style.period) % 2)[..., None]
    elif style.kind == "checker":
        t = ((((yy // style.period) + (xx // style.period)) % 2))[..., None]
    else:  # speckle
        t = rng.random((h, w, 1))
    return a + t * (b - a)


def render_scene(config: SceneConfig, index: int) -> LabeledImage:
    """Render scene ``index``; pure in ``(config, index)``."""
    h, w = config.canvas
    rng = _image_rng(config, index)
    context, presence = sample_labels(rng, config)

    style = config.background_styles[context % len(config.background_styles)]
    pixels = _render_background(style, h, w, rng)
    gt = np.zeros((h, w), dtype=np.int64)

    class_ids = [i + 1 for i in range(config.n_classes) if presence[i]]
    order = [int(v) for v in rng.permutation(class_ids)]  # z-order; later wins
    drawn: list[int] = []

    for class_id in order:
        spec = config.shape_library[class_id - 1]
        prior = config.placement_prior[class_id - 1]
        placed = False
        for _ in range(_MAX_PLACEMENT_TRIES):
            region = int(rng.choice(4, p=prior))
            y0, y1, x0, x1 = _quadrant_bounds(h, w, region)
            cy = rng.uniform(y0 + 1, y1 - 1)
            cx = rng.uniform(x0 + 1, x1 - 1)
            size = rng.uniform(*spec.size_range)
            angle = rng.uniform(0, math.pi)
            mask = _shape_mask(spec.kind, h, w, cy, cx, size, angle)
            if mask.sum() < _MIN_VISIBLE:
                continue
            candidate = gt.copy()
            candidate[mask] = class_id
            # occlusion must not erase an earlier shape
            if any(int((candidate == cid).sum()) < _MIN_VISIBLE for cid in drawn):
                continue
            gt = candidate
            drawn.append(class_id)
            color = np.asarray(spec.color) + rng.uniform(
                -spec.color_jitter, spec.color_jitter, size=3
            )
            pixels[mask] = color
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place class {class_id} on canvas {config.canvas} "
                f"(image {index})"
            )

    pixels = pixels + rng.normal(0.0, 0.02, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)

    labels = frozenset(int(v) for v in np.unique(gt) if v != 0)
    return LabeledImage(pixels=pixels, labels=labels, gt_mask=gt)


@dataclass(frozen=True)
class DatasetManifest:
    """On-disk dataset handle: root directory plus its records."""

    root: Path
    records: tuple[Record, ...]

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"


def generate_dataset(config: SceneConfig, out_dir: str | Path) -> DatasetManifest:
    """Render ``config.n_images`` scenes into ``out_dir``.

    Writes ``images/``, ``masks/`` (held-out ground truth, evaluation only),
    ``manifest.jsonl``, and a ``scene_config.json`` echo.  Output is
    bit-identical for identical configs.
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for index in range(config.n_images):
        scene = render_scene(config, index)
        name = f"img_{index:05d}"
        image_rel = f"images/{name}.png"
        mask_rel = f"masks/{name}.png"
        write_image(root / image_rel, scene.pixels)
        write_mask(root / mask_rel, scene.gt_mask)
        records.append(
            Record(
                id=name,
                image=image_rel,
                gt_mask=mask_rel,
                labels=tuple(sorted(scene.labels)),
            )
        )

    manifest = DatasetManifest(root=root, records=tuple(records))
    write_manifest(manifest.manifest_path, records)
    (root / "scene_config.json").write_text(
        json.dumps(scene_config_to_dict(config), indent=2, sort_keys=True) + "\n"
    )
    return manifest


def split_manifest(
    manifest: DatasetManifest, fractions: tuple[float, float], seed: int | None = None
) -> tuple[tuple[Record, ...], tuple[Record, ...]]:
    """Disjoint seed-deterministic (train, eval) split by record shuffle."""
    train_frac, eval_frac = fractions
    if train_frac <= 0 or eval_frac <= 0:
        raise ConfigError(f"split fractions must be positive, got {fractions}")
    if train_frac + eval_frac > 1.0 + 1e-9:
        raise ConfigError(f"split fractions {fractions} sum past 1")
    n = len(manifest.records)
    n_train = int(round(train_frac * n))
    n_eval = int(round(eval_frac * n))
    n_eval = min(n_eval, n - n_train)
    if n_train < 1 or n_eval < 1:
        raise ConfigError(
            f"split of {n} records by {fractions} leaves an empty side"
        )
    rng = np.random.default_rng(0 if seed is None else seed)
    order = rng.permutation(n)
    train = tuple(manifest.records[i] for i in sorted(order[:n_train]))
    evaluation = tuple(manifest.records[i] for i in sorted(order[n_train:n_train + n_eval]))
    return train, evaluation


def prepare_dataset(
    config: SceneConfig,
    out_dir: str | Path,
    fractions: tuple[float, float] = (0.8, 0.2),
    split_seed: int | None = None,
) -> tuple[tuple[Record, ...], tuple[Record, ...]]:
    """Generate, split, and write ``manifest_train/eval.jsonl`` alongside.

    The split seed defaults to the scene seed, so one seed pins the whole
    dataset artifact.
    """
    manifest = generate_dataset(config, out_dir)
    train, evaluation = split_manifest(
        manifest, fractions, config.seed if split_seed is None else split_seed
    )
    write_manifest(Path(out_dir) / "manifest_train.jsonl", list(train))
    write_manifest(Path(out_dir) / "manifest_eval.jsonl", list(evaluation))
    return train, evaluation


def scene_config_to_dict(config: SceneConfig) -> dict:
    return {
        "n_classes": config.n_classes,
        "canvas": list(config.canvas),
        "cooccurrence": config.cooccurrence.tolist(),
        "confound_strength": config.confound_strength,
        "base_rate": config.base_rate,
        "placement_prior": config.placement_prior.tolist(),
        "shape_library": [
            {
                "kind": s.kind,
                "size_range": list(s.size_range),
                "color": list(s.color),
                "color_jitter": s.color_jitter,
            }
            for s in config.shape_library
        ],
        "background_styles": [
            {
                "kind": s.kind,
                "color_a": list(s.color_a),
                "color_b": list(s.color_b),
                "period": s.period,
            }
            for s in config.background_styles
        ],
        "n_images": config.n_images,
        "seed": config.seed,
    }


def scene_config_from_dict(doc: dict) -> SceneConfig:
    known = {
        "n_classes", "canvas", "cooccurrence", "confound_strength", "base_rate",
        "placement_prior", "shape_library", "background_styles", "n_images", "seed",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
    kwargs: dict = dict(doc)
    if "canvas" in kwargs:
        kwargs["canvas"] = tuple(int(v) for v in kwargs["canvas"])
    if kwargs.get("cooccurrence") is not None:
        kwargs["cooccurrence"] = np.asarray(kwargs["cooccurrence"], dtype=float)
    if kwargs.get("placement_prior") is not None:
        kwargs["placement_prior"] = np.asarray(kwargs["placement_prior"], dtype=float)
    if "shape_library" in kwargs:
        kwargs["shape_library"] = tuple(
            ShapeSpec(
                kind=s["kind"],
                size_range=tuple(s["size_range"]),
                color=tuple(s["color"]),
                color_jitter=s.get("color_jitter", 0.08),
            )
            for s in kwargs["shape_library"]
        )
    if "background_styles" in kwargs:
        kwargs["background_styles"] = tuple(
            BackgroundStyle(
                kind=s["kind"],
                color_a=tuple(s["color_a"]),
                color_b=tuple(s["color_b"]),
                period=s.get("period", 6.0),
            )
            for s in kwargs["background_styles"]
        )
    try:
        return SceneConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
