"""Datasets: synthetic two-letter images, IDX ingestion and batching.

Fluctuation states are never stored here. The training loop draws them per
forward pass, so repeated epochs see the same (X, Y) with fresh S.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GLYPH_A = """
................
.......##.......
......####......
......#..#......
.....##..##.....
.....#....#.....
....##....##....
....#......#....
...##########...
...##########...
..##........##..
..#..........#..
.##..........##.
.#............#.
................
................
"""

GLYPH_B = """
................
..#########.....
..##......##....
..##.......##...
..##.......##...
..##......##....
..#########.....
..#########.....
..##......##....
..##.......##...
..##........##..
..##.......##...
..##......##....
..##########....
................
................
"""


def parse_glyph(art: str) -> np.ndarray:
    rows = [r for r in art.strip().splitlines()]
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


def _resize(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    ri = (np.arange(size) * h) // size
    ci = (np.arange(size) * w) // size
    return mask[np.ix_(ri, ci)]


class IDXFormatError(ValueError):
    """Malformed IDX file; ``field`` names the offending header field or section."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


@dataclass
class LetterSpec:
    """Generator settings for the A/B letter task.

    ``jitter`` is the per-pixel flip probability; a sample is drawn upright or
    sheared by ``slant`` pixels per row (italic), with equal probability.
    """

    templates: dict[int, np.ndarray] = field(
        default_factory=lambda: {0: parse_glyph(GLYPH_A), 1: parse_glyph(GLYPH_B)})
    jitter: float = 0.3
    slant: float = 0.25
    size: int = 16

    def __post_init__(self):
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")
        self.templates = {k: _resize(np.asarray(v, dtype=bool), self.size)
                          for k, v in self.templates.items()}


def shear(mask: np.ndarray, slant: float) -> np.ndarray:
    """Shift each row right by ``slant * (distance above centre)``, zero-filled."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for r in range(h):
        s = int(round(slant * ((h - 1) / 2 - r)))
        if s >= 0:
            out[r, s:] = mask[r, :w - s]
        else:
            out[r, :w + s] = mask[r, -s:]
    return out


def gen_letters(spec: LetterSpec, n_per_class: int, seed: int, split: str = "train") -> Dataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in sorted(spec.templates):
        base = spec.templates[label]
        variants = np.stack([base, shear(base, spec.slant)])
        pick = rng.integers(0, 2, size=n_per_class)
        flips = rng.random((n_per_class,) + base.shape) < spec.jitter
        images.append(variants[pick] ^ flips)
        labels.append(np.full(n_per_class, label))
    order = rng.permutation(n_per_class * len(spec.templates))
    return Dataset(np.concatenate(images)[order].astype(float), np.concatenate(labels)[order], split)


def nearest_template(spec: LetterSpec, images: np.ndarray) -> np.ndarray:
    keys = sorted(spec.templates)
    t = np.stack([spec.templates[k].ravel() for k in keys]).astype(float)
    flat = images.reshape(len(images), -1)
    dist = np.abs(flat[:, None, :] - t[None]).sum(axis=2)
    return np.asarray(keys)[dist.argmin(axis=1)]


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_header(data: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(data) < need:
        raise IDXFormatError("header", f"{path} is truncated ({len(data)} bytes)")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise IDXFormatError("magic", f"{path} has magic {found:#010x}, expected {magic:#010x}")
    return struct.unpack(f">{ndim}I", data[4:need])


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    with _open(images_path) as f:
        raw_images = f.read()
    with _open(labels_path) as f:
        raw_labels = f.read()
    n_img, rows, cols = _read_header(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_header(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IDXFormatError("count", f"{n_img} images but {n_lab} labels")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16)
    if pixels.size != n_img * rows * cols:
        raise IDXFormatError("pixels", f"expected {n_img * rows * cols} pixel bytes, found {pixels.size}")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8)
    if labels.size != n_lab:
        raise IDXFormatError("labels", f"expected {n_lab} label bytes, found {labels.size}")
    images = pixels.reshape(n_img, rows, cols).astype(float) / 255.0
    return Dataset(images, labels.astype(np.int64), split)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    n, rows, cols = ds.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.rint(ds.images * 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def write_csv(ds: Dataset, path) -> None:
    """One row per image: label, then pixels in row-major order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        flat = ds.flat()
        w.writerow(["label"] + [f"p{i}" for i in range(flat.shape[1])])
        for label, row in zip(ds.labels, flat):
            w.writerow([int(label)] + [f"{v:.6g}" for v in row])


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    flat = ds.flat()
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield flat[idx], ds.labels[idx]
