"""Synthetic datasets, class imbalance, splits and image corruptions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d), values in [0, 1]
    labels: np.ndarray  # (n,) int
    num_classes: int
    grid: tuple | None = None  # (height, width) for image data

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            self.inputs = self.inputs.reshape(len(self.labels), -1)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("input values must lie in [0, 1]")
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)
            if self.grid[0] * self.grid[1] != self.inputs.shape[1]:
                raise ValueError(f"grid {self.grid} does not match input dim {self.inputs.shape[1]}")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.num_classes == other.num_classes
            and self.grid == other.grid
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.grid)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def gen_blobs(K, dim, n_per_class, spread, seed=0) -> Dataset:
    """
    Gaussian clusters around distinct points of a regular lattice in [0.15, 0.85]^dim.

    The lattice has ceil(K ** (1/dim)) levels per axis, so well separated
    centers need no rejection sampling in high dimension.
    """
    if K < 2 or dim < 2:
        raise ValueError("need K >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    levels = int(np.ceil(K ** (1.0 / dim) - 1e-9))
    levels = max(levels, 2)
    grid = np.linspace(0.15, 0.85, levels)
    codes = set()
    centers = []
    while len(centers) < K:
        code = tuple(rng.integers(0, levels, size=dim))
        if code not in codes:
            codes.add(code)
            centers.append(grid[list(code)])
    centers = np.array(centers)
    labels = np.repeat(np.arange(K), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, K)


def blob_centers(K, dim, seed=0):
    """Centers used by :func:`gen_blobs` for the same arguments."""
    return np.array([gen_blobs(K, dim, 1, 0.0, seed).inputs[k] for k in range(K)])


def base_patterns(K, side, seed=0, low=0.25, high=0.75):
    """K distinct two-level side x side patterns, each flattened row-major."""
    if side < 4:
        raise ValueError("side must be at least 4")
    if K > side * side:
        raise ValueError(f"cannot build {K} distinct patterns on a {side}x{side} grid")
    rng = np.random.default_rng(seed)
    min_hamming = side * side // 4
    masks = []
    rejected = 0
    while len(masks) < K:
        m = rng.random(side * side) < 0.5
        if all((m != o).sum() >= min_hamming for o in masks):
            masks.append(m)
            continue
        rejected += 1
        if rejected % 1000 == 0:
            min_hamming = max(1, min_hamming // 2)
    return np.where(np.array(masks), high, low)


def gen_patterns(K, side, n_per_class, noise, seed=0, levels=(0.25, 0.75)) -> Dataset:
    """Fixed two-level base patterns on a side x side grid plus uniform noise in [-noise, noise]."""
    patterns = base_patterns(K, side, seed, *levels)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(K), n_per_class)
    x = patterns[labels] + rng.uniform(-noise, noise, size=(len(labels), side * side))
    return Dataset(np.clip(x, 0.0, 1.0), labels, K, grid=(side, side))


@dataclass(frozen=True)
class ImbalanceSpec:
    kind: str  # "linear" or "exponential"
    max_n: int | None = None  # defaults to the size of class 0
    min_n: int | None = None  # linear only
    factor: float = 1.0  # exponential only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ValueError(f"unknown imbalance kind {self.kind!r}")
        if self.kind == "linear":
            if self.min_n is None or self.max_n is None or not self.max_n >= self.min_n >= 1:
                raise ValueError("linear imbalance needs max_n >= min_n >= 1")
        elif self.factor < 1:
            raise ValueError("imbalance factor must be >= 1")

    def counts(self, K, max_n=None):
        top = self.max_n if self.max_n is not None else max_n
        c = np.arange(K)
        denom = max(K - 1, 1)
        if self.kind == "linear":
            raw = top - c * (top - self.min_n) / denom
        else:
            raw = top * self.factor ** (-c / denom)
        # round half up; numpy rounds half to even
        return np.floor(raw + 0.5).astype(np.int64)


def make_imbalanced(d: Dataset, spec: ImbalanceSpec) -> Dataset:
    """Keep a seeded random subset of each class, sized by ``spec``; original order is preserved."""
    available = d.class_counts()
    counts = spec.counts(d.num_classes, max_n=int(available[0]))
    if np.any(counts > available):
        bad = int(np.argmax(counts > available))
        raise ValueError(f"class {bad} needs {counts[bad]} samples but only {available[bad]} exist")
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.labels == c)
        keep.append(rng.choice(idx, size=counts[c], replace=False))
    return d.subset(np.sort(np.concatenate(keep)))


def split(d: Dataset, holdout_frac=0.2, seed=0) -> tuple[Dataset, Dataset]:
    """Seeded random split into (train, holdout)."""
    n = len(d)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_hold = int(round(n * holdout_frac))
    return d.subset(np.sort(order[n_hold:])), d.subset(np.sort(order[:n_hold]))


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"  # none | brightness | contrast | gaussian_noise
    factor: float = 1.0
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "brightness", "contrast", "gaussian_noise"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.factor <= 0:
            raise ValueError("factor must be positive")
        if self.std < 0:
            raise ValueError("std must be non-negative")

    @property
    def label(self):
        if self.kind in ("brightness", "contrast"):
            return f"{self.kind}({self.factor:g})"
        if self.kind == "gaussian_noise":
            return f"gaussian_noise({self.std:g})"
        return "none"


def apply_transform(x, spec: TransformSpec) -> np.ndarray:
    """Apply a corruption to one image (1-D) or a batch of images (rows); output is clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "none":
        return x.copy()
    if spec.kind == "brightness":
        out = x * spec.factor
    elif spec.kind == "contrast":
        mean = x.mean(axis=-1, keepdims=True)
        out = (x - mean) * spec.factor + mean
    else:
        if spec.std == 0:
            return x.copy()
        out = x + np.random.default_rng(spec.seed).normal(0.0, spec.std, size=x.shape)
    return np.clip(out, 0.0, 1.0)


def save_jsonl(d: Dataset, path) -> Path:
    path = Path(path)
    grid = list(d.grid) if d.grid else None
    with path.open("w") as fh:
        for x, y in zip(d.inputs, d.labels):
            fh.write(json.dumps({"input": x.tolist(), "label": int(y), "grid": grid}) + "\n")
    return path


def load_jsonl(path, num_classes=None) -> Dataset:
    xs, ys, grid = [], [], None
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            xs.append(rec["input"])
            ys.append(rec["label"])
            grid = rec.get("grid") or grid
    K = num_classes if num_classes is not None else (max(ys) + 1 if ys else 0)
    return Dataset(np.array(xs, dtype=np.float64).reshape(len(ys), -1), np.array(ys), K,
                   tuple(grid) if grid else None)
