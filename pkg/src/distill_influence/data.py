"""Datasets, CSV ingestion, train/val splitting and deterministic batching."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataError, ParseError


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.features[idx], self.labels[idx], self.ids[idx])


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureStats":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer labels and unique per-row ids.

    ``noise_mask`` marks rows whose label was synthetically corrupted.
    ``raw_features`` keeps unstandardized values when standardization was
    applied, so that a later split can refit statistics on its train rows.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    noise_mask: Optional[np.ndarray] = None
    raw_features: Optional[np.ndarray] = field(default=None, repr=False)
    stats: Optional[FeatureStats] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise DataError("features, labels and ids disagree on row count")
        if self.noise_mask is not None and self.noise_mask.shape != (n,):
            raise DataError("noise mask length does not match row count")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids are not unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels, self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            ids=self.ids[idx],
            noise_mask=None if self.noise_mask is None else self.noise_mask[idx],
            raw_features=None if self.raw_features is None else self.raw_features[idx],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels.astype("<i8"), self.ids.astype("<i8")):
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()[:16]


def flip_labels(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Move ``round(rate * n)`` labels to a uniformly chosen different class."""
    if not 0 <= rate < 1:
        raise DataError(f"label noise rate must be in [0, 1), got {rate}")
    n, c = len(dataset), dataset.num_classes
    rng = np.random.default_rng(seed)
    k = int(round(rate * n))
    rows = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.intp)
    labels = dataset.labels.copy()
    shift = rng.integers(1, c, size=k)
    labels[rows] = (labels[rows] + shift) % c
    mask = np.zeros(n, dtype=bool)
    mask[rows] = True
    return replace(dataset, labels=labels, noise_mask=mask)


def make_gaussian_task(
    num_classes: int,
    dim: int,
    separation: float,
    label_noise_rate: float,
    n: int,
    seed: int,
    *,
    means_seed: Optional[int] = None,
    id_offset: int = 0,
) -> Dataset:
    """Class-conditional unit-variance Gaussians, class means ``separation`` apart.

    Labels are balanced. ``means_seed`` fixes the class means independently
    of ``seed`` so train and validation draws can share a task.
    """
    if separation <= 0:
        raise DataError("separation must be positive")
    if num_classes < 2:
        raise DataError("need at least two classes")
    if n < num_classes:
        raise DataError(f"n={n} is smaller than num_classes={num_classes}")
    mrng = np.random.default_rng(seed if means_seed is None else means_seed)
    if dim >= num_classes:
        q, _ = np.linalg.qr(mrng.standard_normal((dim, num_classes)))
        means = (separation / np.sqrt(2.0)) * q.T  # pairwise distance == separation
    else:
        dirs = mrng.standard_normal((num_classes, dim))
        means = 0.5 * separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 1])
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.standard_normal((n, dim))
    ds = Dataset(features, labels.astype(np.int64), np.arange(id_offset, id_offset + n),
                 num_classes, noise_mask=np.zeros(n, dtype=bool))
    if label_noise_rate > 0:
        ds = flip_labels(ds, label_noise_rate, seed=[seed, 2])
    elif label_noise_rate < 0:
        raise DataError("label noise rate must be in [0, 1)")
    return ds


def load_csv_task(
    path,
    label_column: str,
    *,
    stats: Optional[FeatureStats] = None,
    num_classes: Optional[int] = None,
) -> Dataset:
    """Read a numeric CSV with a header row; the label column holds class indices.

    Features are standardized with ``stats`` if given, else with statistics of
    this file's own rows (treat it as the training split).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise ParseError(f"{path}: duplicate header names {dupes}")
    if label_column not in header:
        raise ParseError(f"{path}: label column {label_column!r} not in header {header}")
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    li = header.index(label_column)
    feats, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        vals = []
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {r}, column {c + 1} ({header[c]!r}): non-numeric value {cell!r}"
                ) from None
            if c == li:
                if v != int(v) or v < 0:
                    raise ParseError(f"{path}: row {r}: label {cell!r} is not a class index")
                labels.append(int(v))
            else:
                vals.append(v)
        feats.append(vals)
    raw = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    stats = stats or FeatureStats.fit(raw)
    return Dataset(stats.apply(raw), labels, np.arange(len(labels)), k,
                   raw_features=raw, stats=stats)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "provided-val"
    carve_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in ("provided-val", "carve-from-train"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if self.mode == "carve-from-train" and not 0 < self.carve_fraction < 1:
            raise DataError("carve fraction must lie in (0, 1)")


def split(dataset: Dataset, spec: SplitSpec, seed: int, val: Optional[Dataset] = None):
    """Return ``(train, val)``.

    ``provided-val`` passes ``dataset`` and ``val`` through. ``carve-from-train``
    moves ``round(fraction * n)`` random rows into validation; CSV-derived data
    is re-standardized with statistics of the remaining train rows only.
    """
    if spec.mode == "provided-val":
        if val is None:
            raise DataError("provided-val split needs a validation dataset")
        return dataset, val
    n = len(dataset)
    k = int(round(spec.carve_fraction * n))
    if n - k < 1:
        raise DataError("carving leaves no training rows")
    if k < 1:
        raise DataError("carve fraction yields an empty validation set")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:k]), np.sort(perm[k:])
    train, held = dataset.subset(train_idx), dataset.subset(val_idx)
    if dataset.raw_features is not None:
        stats = FeatureStats.fit(train.raw_features)
        train = replace(train, features=stats.apply(train.raw_features), stats=stats)
        held = replace(held, features=stats.apply(held.raw_features), stats=stats)
    return train, held


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffled mini-batches for one epoch; the final short batch is kept."""
    if batch_size <= 0:
        raise DataError(f"batch size must be positive, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    full = dataset.as_batch()
    for start in range(0, len(perm), batch_size):
        yield full.subset(perm[start : start + batch_size])


class BatchStream:
    """Endless batch iterator that reshuffles each epoch under its own seed."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if len(dataset) == 0:
            raise DataError("cannot stream batches from an empty dataset")
        self.dataset, self.batch_size, self.seed = dataset, batch_size, seed
        self.epoch = 0
        self._it = batches(dataset, batch_size, seed, 0)

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        try:
            return next(self._it)
        except StopIteration:
            self.epoch += 1
            self._it = batches(self.dataset, self.batch_size, self.seed, self.epoch)
            return next(self._it)
