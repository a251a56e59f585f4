"""Datasets: synthetic slice-traffic stand-in, CSV ingestion, partitioning.

The synthetic generator produces Gaussian class clusters and is the default
data source; real traffic traces can be supplied as a CSV with a header row
and a named label column (features are standardized per column, labels
one-hot encoded in first-appearance order).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

VARIANCE_FLOOR = 1e-12
_SNAP_TOL = 1e-9  # treat near-zero means / near-unit scales as exact


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n, c) one-hot rows
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", np.ascontiguousarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.float64))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise InputError("features and labels must be 2-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features and labels must have equal row counts")
        if self.features.shape[0] < 1:
            raise InputError("dataset must contain at least one sample")
        if self.labels.shape[1] != len(self.class_names):
            raise InputError("label width must match the number of class names")
        one_hot = np.isin(self.labels, (0.0, 1.0)).all() and (self.labels.sum(axis=1) == 1.0).all()
        if not one_hot:
            raise InputError("labels must be one-hot rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def label_indices(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names)


@dataclass(frozen=True)
class PartitionSpec:
    clients: int
    mode: str  # "one-class" or "iid"
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1:
            raise InputError("need at least one client")
        if self.mode not in ("one-class", "iid"):
            raise InputError(f"unknown partition mode {self.mode!r}")


def _one_hot(indices: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((indices.shape[0], n_classes))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def gen_synthetic(
    samples: int,
    feature_dim: int = 16,
    classes: int = 3,
    separation: float = 6.0,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian class clusters with pairwise mean distance ``separation``.

    Returns a (train, test) pair; the test split holds out ``test_fraction``
    of every class so both splits share the class balance. Deterministic in
    ``seed``.
    """
    if classes < 2:
        raise InputError("need at least two classes")
    if separation < 0:
        raise InputError("separation must be nonnegative")
    if samples < classes:
        raise InputError("need at least one sample per class")
    if not 0.0 < test_fraction < 1.0:
        raise InputError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if classes <= feature_dim:
        directions = np.eye(classes, feature_dim)
    else:
        raw = rng.standard_normal((classes, feature_dim))
        directions = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    # Means at separation/sqrt(2) along orthonormal directions sit exactly
    # `separation` apart pairwise.
    means = (separation / np.sqrt(2.0)) * directions

    base, extra = divmod(samples, classes)
    counts = [base + (1 if k < extra else 0) for k in range(classes)]
    label_idx = np.repeat(np.arange(classes), counts)
    order = rng.permutation(samples)
    label_idx = label_idx[order]
    features = means[label_idx] + rng.standard_normal((samples, feature_dim))

    class_names = tuple(f"class_{k}" for k in range(classes))
    test_mask = np.zeros(samples, dtype=bool)
    for k in range(classes):
        positions = np.flatnonzero(label_idx == k)
        n_test = max(1, round(test_fraction * positions.size))
        test_mask[positions[:n_test]] = True

    labels = _one_hot(label_idx, classes)
    train = LabeledDataset(features[~test_mask], labels[~test_mask], class_names)
    test = LabeledDataset(features[test_mask], labels[test_mask], class_names)
    return train, test


def _standardize(features: np.ndarray) -> np.ndarray:
    mean = features.mean(axis=0)
    mean[np.abs(mean) < _SNAP_TOL] = 0.0
    scale = np.sqrt(np.maximum(features.var(axis=0), VARIANCE_FLOOR))
    scale[np.abs(scale - 1.0) < _SNAP_TOL] = 1.0
    return (features - mean) / scale


def load_csv(path, label_column: str) -> LabeledDataset:
    """Read a labeled dataset from CSV.

    All non-label columns are numeric features, standardized to zero mean
    and unit variance per column (variance floor 1e-12; constant columns
    become all-zeros). Labels are one-hot encoded in first-appearance order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path} is empty") from None
        if label_column not in header:
            raise FormatError(f"missing label column {label_column!r} in {path}")
        label_pos = header.index(label_column)
        feature_pos = [i for i in range(len(header)) if i != label_pos]
        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise FormatError(f"row {rownum}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feature_pos])
            except ValueError as exc:
                raise FormatError(f"row {rownum}: non-numeric feature cell ({exc})") from None
            raw_labels.append(row[label_pos])
    if not rows:
        raise FormatError(f"{path} has a header but no data rows")
    class_names: list[str] = []
    for name in raw_labels:
        if name not in class_names:
            class_names.append(name)
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    label_idx = np.array([name_to_idx[name] for name in raw_labels])
    features = _standardize(np.asarray(rows, dtype=np.float64))
    return LabeledDataset(features, _one_hot(label_idx, len(class_names)), tuple(class_names))


def save_csv(ds: LabeledDataset, path, label_column: str = "label") -> None:
    """Write a dataset with repr-precision floats; inverse of load_csv for
    already-standardized features."""
    path = Path(path)
    idx = ds.label_indices()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.feature_dim)] + [label_column])
        for row, k in zip(ds.features, idx):
            writer.writerow([repr(float(v)) for v in row] + [ds.class_names[k]])


def partition(ds: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split a dataset into disjoint, exhaustive per-client shards.

    ``one-class`` assigns client m the class ``m mod n_classes`` and divides
    each class's samples evenly among its clients; ``iid`` shuffles and
    splits evenly.
    """
    rng = np.random.default_rng(spec.seed)
    m = spec.clients
    if spec.mode == "iid":
        if m > ds.n:
            raise InputError(f"cannot give {m} clients at least one of {ds.n} samples")
        chunks = np.array_split(rng.permutation(ds.n), m)
        return [ds.subset(chunk) for chunk in chunks]

    c = ds.n_classes
    if m < c:
        raise InputError(
            f"one-class mode needs at least {c} clients to cover every class, got {m}"
        )
    label_idx = ds.label_indices()
    assigned: list[np.ndarray] = [None] * m  # type: ignore
    for k in range(c):
        holders = [client for client in range(m) if client % c == k]
        members = rng.permutation(np.flatnonzero(label_idx == k))
        if members.size < len(holders):
            raise InputError(
                f"class {ds.class_names[k]} has {members.size} samples for "
                f"{len(holders)} clients"
            )
        for holder, chunk in zip(holders, np.array_split(members, len(holders))):
            assigned[holder] = chunk
    return [ds.subset(chunk) for chunk in assigned]


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified hold-out split used when data arrives via CSV."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    label_idx = ds.label_indices()
    test_mask = np.zeros(ds.n, dtype=bool)
    for k in range(ds.n_classes):
        positions = rng.permutation(np.flatnonzero(label_idx == k))
        n_test = max(1, round(test_fraction * positions.size))
        if n_test >= positions.size:
            raise InputError(f"class {ds.class_names[k]} too small to split")
        test_mask[positions[:n_test]] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))
