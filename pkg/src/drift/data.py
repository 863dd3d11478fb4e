"""Datasets with a labeled/unlabeled split, generators, CSV I/O and batch sampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

UNLABELED = -1
SAMPLING_MODES = ("with_replacement_uniform", "epoch_shuffle")


class CsvFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus observed labels (-1 = unlabeled).

    ``true_labels`` holds ground truth for evaluation only and may be None for
    loaded data without a sidecar.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    true_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ValueError(f"features {feats.shape} and labels {labels.shape} disagree")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        bad = (labels != UNLABELED) & ((labels < 0) | (labels >= self.num_classes))
        if bad.any():
            raise ValueError(f"label out of range at rows {np.flatnonzero(bad)[:5].tolist()}")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.true_labels is not None:
            true = np.array(self.true_labels, dtype=np.int64)
            if true.shape != labels.shape:
                raise ValueError("true_labels must match labels in length")
            true.setflags(write=False)
            object.__setattr__(self, "true_labels", true)

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == UNLABELED)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return replace(self, labels=labels)


def _moon_points(n: int, upper: bool) -> np.ndarray:
    angles = np.linspace(0.0, np.pi, n) if n > 1 else np.zeros(1)
    if upper:
        return np.column_stack([np.cos(angles), np.sin(angles)])
    return np.column_stack([1.0 - np.cos(angles), 1.0 - np.sin(angles) - 0.5])


def make_two_moons(n_labeled_per_class: int = 12, n_unlabeled_per_class: int = 500,
                   noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving unit half-circles with isotropic Gaussian noise.

    Class 0 is the upper moon (cos t, sin t); class 1 is the lower moon
    (1 - cos t, 1 - sin t - 0.5). Points are evenly spaced in angle t over
    [0, pi], then a random subset of each class keeps its label.
    """
    if n_labeled_per_class < 1 or n_unlabeled_per_class < 1:
        raise ValueError("per-class counts must be at least 1")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    per_class = n_labeled_per_class + n_unlabeled_per_class
    features = np.concatenate([_moon_points(per_class, True), _moon_points(per_class, False)])
    true = np.repeat([0, 1], per_class)
    if noise_std > 0:
        features = features + rng.normal(scale=noise_std, size=features.shape)
    labels = np.full(2 * per_class, UNLABELED)
    for c in (0, 1):
        chosen = rng.choice(per_class, size=n_labeled_per_class, replace=False) + c * per_class
        labels[chosen] = c
    meta = {"generator": "two_moons", "seed": seed, "noise_std": noise_std,
            "n_labeled_per_class": n_labeled_per_class,
            "n_unlabeled_per_class": n_unlabeled_per_class}
    return Dataset(features, labels, 2, true, meta)


def make_blobs(n_labeled_per_class: int, n_unlabeled_per_class: int, num_classes: int = 2,
               separation: float = 4.0, std: float = 0.5, dim: int = 2, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs with centers spaced ``separation`` apart on the first axis."""
    if n_labeled_per_class < 1 or n_unlabeled_per_class < 0:
        raise ValueError("invalid per-class counts")
    rng = np.random.default_rng(seed)
    per_class = n_labeled_per_class + n_unlabeled_per_class
    feats, labels, true = [], [], []
    for c in range(num_classes):
        center = np.zeros(dim)
        center[0] = c * separation
        feats.append(center + rng.normal(scale=std, size=(per_class, dim)))
        obs = np.full(per_class, UNLABELED)
        obs[:n_labeled_per_class] = c
        labels.append(obs)
        true.append(np.full(per_class, c))
    meta = {"generator": "blobs", "seed": seed, "separation": separation, "std": std,
            "n_labeled_per_class": n_labeled_per_class,
            "n_unlabeled_per_class": n_unlabeled_per_class}
    return Dataset(np.concatenate(feats), np.concatenate(labels), num_classes,
                   np.concatenate(true), meta)


def inject_label_noise(ds: Dataset, flip_rate: float, seed: int) -> Dataset:
    """Replace each observed label, with probability ``flip_rate``, by a different class."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip_rate must lie in [0, 1]")
    idx = ds.labeled_indices
    if idx.size == 0:
        raise ValueError("dataset has no labeled samples")
    rng = np.random.default_rng(seed)
    flip = rng.random(idx.size) < flip_rate
    # shift by 1..C-1 is a uniform draw over the other classes
    shift = rng.integers(1, ds.num_classes, size=idx.size)
    labels = ds.labels.copy()
    labels[idx] = np.where(flip, (labels[idx] + shift) % ds.num_classes, labels[idx])
    true = ds.true_labels if ds.true_labels is not None else ds.labels.copy()
    meta = dict(ds.meta, flip_rate=flip_rate, noise_seed=seed)
    return Dataset(ds.features, labels, ds.num_classes, true, meta)


# ---------------------------------------------------------------- CSV

def write_csv(ds: Dataset, path, label_column: str = "label", sentinel: str = "",
              sidecar: bool = True) -> None:
    """Write features and observed labels; hidden labels go to ``<path>.json``."""
    path = Path(path)
    header = [f"x{i}" for i in range(ds.input_dim)] + [label_column]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row]
                            + [sentinel if label == UNLABELED else str(int(label))])
    if sidecar:
        side = {
            "generator": ds.meta.get("generator"),
            "seed": ds.meta.get("seed"),
            "noise": {k: v for k, v in ds.meta.items()
                      if k not in ("generator", "seed")},
            "num_classes": ds.num_classes,
            "label_column": label_column,
            "unlabeled_sentinel": sentinel,
            "true_labels": None if ds.true_labels is None else ds.true_labels.tolist(),
        }
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)
            fh.write("\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_csv(path, label_column: str = "label", unlabeled_sentinel: str = "",
             num_classes: Optional[int] = None) -> Dataset:
    """Load a header-row CSV; cells equal to the sentinel in the label column are unlabeled.

    A sidecar ``<path>.json`` written by :func:`write_csv`, if present, supplies
    hidden true labels and the class count.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError("no data rows")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise CsvFormatError(f"unknown label column {label_column!r}; header is {header}", 1)
    label_pos = header.index(label_column)
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if r]
    if not body:
        raise CsvFormatError("no data rows")
    features, labels = [], []
    for line, row in body:
        if len(row) != len(header):
            raise CsvFormatError(f"expected {len(header)} cells, found {len(row)}", line)
        feats = []
        for j, cell in enumerate(row):
            if j == label_pos:
                continue
            try:
                feats.append(float(cell))
            except ValueError:
                raise CsvFormatError(f"non-numeric cell {cell!r} in column {header[j]!r}", line) from None
            if not math.isfinite(feats[-1]):
                raise CsvFormatError(f"non-finite cell {cell!r} in column {header[j]!r}", line)
        raw = row[label_pos].strip()
        if raw == unlabeled_sentinel:
            labels.append(UNLABELED)
        else:
            try:
                value = float(raw)
            except ValueError:
                raise CsvFormatError(f"non-numeric label {raw!r}", line) from None
            if value != int(value) or value < 0:
                raise CsvFormatError(f"label {raw!r} is not a class index", line)
            labels.append(int(value))
        features.append(feats)

    true_labels, meta = None, {"source": str(path)}
    side = sidecar_path(path)
    if side.exists():
        with open(side, encoding="utf-8") as fh:
            info = json.load(fh)
        if info.get("true_labels") is not None:
            true_labels = info["true_labels"]
            if len(true_labels) != len(labels):
                raise CsvFormatError(f"sidecar has {len(true_labels)} true labels for {len(labels)} rows")
        num_classes = num_classes or info.get("num_classes")
        meta.update({k: info[k] for k in ("generator", "seed") if k in info})
        meta.update(info.get("noise") or {})
    if num_classes is None:
        known = [y for y in labels if y != UNLABELED] + list(true_labels or [])
        num_classes = max(2, max(known) + 1) if known else 2
    return Dataset(np.array(features), np.array(labels), int(num_classes), true_labels, meta)


# ---------------------------------------------------------------- sampling

class BatchSampler:
    """Deterministic stream of (labeled, unlabeled) index batches.

    A batch size of None means the whole pool every call (full batch).
    """

    def __init__(self, seed: int, labeled_batch_size: Optional[int] = None,
                 unlabeled_batch_size: Optional[int] = None, mode: str = "epoch_shuffle"):
        if mode not in SAMPLING_MODES:
            raise ValueError(f"sampling mode must be one of {SAMPLING_MODES}")
        for size in (labeled_batch_size, unlabeled_batch_size):
            if size is not None and size < 0:
                raise ValueError("batch sizes must be non-negative")
        self.seed = seed
        self.labeled_batch_size = labeled_batch_size
        self.unlabeled_batch_size = unlabeled_batch_size
        self.mode = mode
        self._rng = np.random.default_rng(seed)
        self._queues: dict = {"labeled": [], "unlabeled": []}

    def _draw(self, pool: np.ndarray, size: Optional[int], key: str) -> np.ndarray:
        if size is None:
            return pool.copy()
        if size == 0:
            return pool[:0].copy()
        if self.mode == "with_replacement_uniform":
            if pool.size == 0:
                raise ValueError(f"cannot sample from an empty {key} pool")
            return pool[self._rng.integers(0, pool.size, size=size)]
        if size > pool.size:
            raise ValueError(f"{key} batch size {size} exceeds pool size {pool.size}")
        queue = self._queues[key]
        if len(queue) < size:
            # drop the remainder and start a new epoch
            queue[:] = list(self._rng.permutation(pool))
        batch, queue[:] = queue[:size], queue[size:]
        return np.asarray(batch, dtype=np.int64)


def next_batches(sampler: BatchSampler, ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    labeled = sampler._draw(ds.labeled_indices, sampler.labeled_batch_size, "labeled")
    unlabeled = sampler._draw(ds.unlabeled_indices, sampler.unlabeled_batch_size, "unlabeled")
    return labeled, unlabeled
