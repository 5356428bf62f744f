"""Desk-scale datasets: procedural mini-digits, blobs, moons, CSV and IDX files.

All features are mapped into ``[0, 1]`` and split into disjoint
train/validation/test partitions with a fixed permutation seed.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.datasets import make_moons

from .errors import ConfigError, ParseError

SOURCES = ("digits", "blobs", "moons", "csv", "idx")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_GLYPHS = {
    0: [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    1: ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    2: [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    3: ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    4: ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    5: ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    6: ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    7: ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    8: [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    9: [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}


@dataclass
class DatasetSpec:
    source: str = "digits"
    n: int = 3000
    classes: int = 10
    dim: int = 2
    separation: float = 4.0
    noise: float = 0.25
    path: str = ""
    images_path: str = ""
    labels_path: str = ""
    feature_columns: list = field(default_factory=list)
    label_column: str = "label"
    normalize: str = "auto"
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"dataset source must be one of {SOURCES}, got {self.source!r}")
        if self.normalize not in ("auto", "minmax", "none"):
            raise ConfigError("normalize must be auto, minmax or none")
        if not (0 <= self.test_fraction < 1 and 0 <= self.val_fraction < 1
                and self.test_fraction + self.val_fraction < 1):
            raise ConfigError("split fractions must be in [0, 1) and sum below 1")


@dataclass
class Splits:
    train: tuple
    val: tuple
    test: tuple
    num_classes: int
    input_shape: tuple


def mini_digits(n: int, noise: float = 0.25, seed: int = 0):
    """Procedural 8x8 digit images ``(n, 1, 8, 8)`` in ``[0, 1]`` with labels 0-9.

    Each image is a 5x7 glyph at a random offset, with random stroke intensity,
    a random background level and additive Gaussian pixel noise of std ``noise``.
    """
    rng = np.random.default_rng(seed)
    glyphs = np.array([[[c == "#" for c in row] for row in _GLYPHS[d]] for d in range(10)], float)
    y = rng.integers(0, 10, size=n)
    x = np.zeros((n, 8, 8))
    dr = rng.integers(0, 2, size=n)
    dc = rng.integers(0, 4, size=n)
    ink = rng.uniform(0.6, 1.0, size=n)
    background = rng.uniform(0.0, 0.2, size=n)
    for i in range(n):
        x[i, dr[i]:dr[i] + 7, dc[i]:dc[i] + 5] = glyphs[y[i]] * ink[i]
    x = np.maximum(x, background[:, None, None]) + noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0)[:, None], y


def blobs(n: int, classes: int, dim: int, separation: float, seed: int = 0):
    """Isotropic unit-variance Gaussian clusters whose closest centres are ``separation`` apart."""
    if classes < 2 or dim < 1:
        raise ConfigError("blobs need at least 2 classes and 1 dimension")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    gaps = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
    closest = gaps[~np.eye(classes, dtype=bool)].min()
    centres *= separation / closest
    y = np.arange(n) % classes
    rng.shuffle(y)
    return centres[y] + rng.standard_normal((n, dim)), y


def minmax(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(len(x), -1)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return ((flat - lo) / span).reshape(x.shape)


def read_csv(path, feature_columns=(), label_column="label"):
    """Parse a headed CSV file into float features and integer labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("CSV file is empty", "line 1")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise ParseError(f"label column {label_column!r} not in header", "line 1")
    features = list(feature_columns) or [h for h in header if h != label_column]
    missing = [c for c in features if c not in header]
    if missing:
        raise ParseError(f"feature columns {missing} not in header", "line 1")
    fidx = [header.index(c) for c in features]
    lidx = header.index(label_column)
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", f"line {lineno}")
        try:
            xs.append([float(row[i]) for i in fidx])
            label = float(row[lidx])
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", f"line {lineno}") from None
        if label != int(label) or label < 0:
            raise ParseError(f"label {row[lidx]!r} is not a non-negative integer", f"line {lineno}")
        ys.append(int(label))
    x = np.array(xs, dtype=np.float64).reshape(len(xs), len(fidx))
    return x, np.array(ys, dtype=np.int64)


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ParseError("IDX file shorter than its magic number", "offset 0")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise ParseError(f"IDX magic 0x{found:08x}, expected 0x{magic:08x}", "offset 0")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise ParseError("IDX header truncated", "offset 4")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    size = int(np.prod(dims))
    if len(data) - end != size:
        raise ParseError(f"IDX payload has {len(data) - end} bytes, header declares {size}",
                         f"offset {end}")
    return np.frombuffer(data, dtype=np.uint8, offset=end).reshape(dims)


def read_idx_pair(images_path, labels_path):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels")
    return images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64)


def _raw(spec: DatasetSpec):
    if spec.source == "digits":
        return mini_digits(spec.n, spec.noise, spec.seed)
    if spec.source == "blobs":
        x, y = blobs(spec.n, spec.classes, spec.dim, spec.separation, spec.seed)
        return minmax(x) if spec.normalize != "none" else x, y
    if spec.source == "moons":
        x, y = make_moons(spec.n, noise=spec.noise, random_state=spec.seed)
        return minmax(x) if spec.normalize != "none" else x, y.astype(np.int64)
    if spec.source == "csv":
        x, y = read_csv(spec.path, spec.feature_columns, spec.label_column)
        out_of_range = len(x) and (x.min() < 0 or x.max() > 1)
        if spec.normalize == "minmax" or (spec.normalize == "auto" and out_of_range):
            x = minmax(x)
        return x, y
    return read_idx_pair(spec.images_path, spec.labels_path)


def load_dataset(spec: DatasetSpec) -> Splits:
    """Materialise ``spec`` and split it deterministically."""
    x, y = _raw(spec)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if len(x) and (x.min() < 0 or x.max() > 1):
        raise ConfigError("features fall outside [0, 1]; set normalize=minmax")
    n = len(x)
    perm = np.random.default_rng([spec.seed & 0xFFFFFFFF, 17]).permutation(n)
    n_test = int(round(spec.test_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    parts = np.split(perm, [n_test, n_test + n_val])
    test, val, train = ((x[p], y[p]) for p in parts)
    classes = max(int(y.max()) + 1 if n else 0, spec.classes if spec.source == "blobs" else 0)
    return Splits(train, val, test, classes, x.shape[1:])
