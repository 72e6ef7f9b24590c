"""Raster and manifest I/O shared by the generator, pipeline, and CLI.

Conventions: images are ``(h, w, 3)`` float arrays in ``[0, 1]`` stored as
8-bit RGB PNG; class masks are ``(h, w)`` integer rasters with values in
``{0..n_classes}`` plus :data:`IGNORE` (255), stored as 8-bit single-channel
PNG.  Manifests are JSON-lines files with one record per image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import IGNORE
from .errors import ValidationError

__all__ = [
    "IGNORE",
    "Record",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "read_manifest",
    "write_manifest",
]


@dataclass(frozen=True)
class Record:
    """One manifest line: an image, its held-out truth, and its label set."""

    id: str
    image: str
    gt_mask: str
    labels: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "gt_mask": self.gt_mask,
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Record":
        try:
            return cls(
                id=str(doc["id"]),
                image=str(doc["image"]),
                gt_mask=str(doc["gt_mask"]),
                labels=tuple(int(v) for v in doc["labels"]),
            )
        except KeyError as exc:
            raise ValidationError(f"manifest record missing field {exc}") from exc


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    """Save an ``(h, w, 3)`` float image in ``[0, 1]`` as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(pixels, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Save a class-id raster as 8-bit single-channel PNG (255 = IGNORE)."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {arr.shape}")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int64)


def write_manifest(path: str | Path, records: list[Record]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict()) + "\n")


def read_manifest(path: str | Path) -> list[Record]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(Record.from_dict(json.loads(line)))
    return records
