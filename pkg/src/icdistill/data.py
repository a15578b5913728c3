"""Tabular datasets: CSV ingestion, train/val/test splits and feature scaling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_MISSING = {"", "nan", "NaN", "NA", "N/A", "?", "null", "None"}


class DataError(ValueError):
    """Raised for malformed input data."""


@dataclass
class Dataset:
    """Feature matrix ``X`` (n x d) with integer labels ``y`` in ``[0, num_classes)``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        n = self.X.shape[0]
        if n < 1:
            raise DataError("dataset must have at least one row")
        if self.y.shape[0] != n:
            raise DataError(f"X has {n} rows but y has {self.y.shape[0]} labels")
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1
        self.num_classes = int(self.num_classes)
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(self.X).all():
            raise DataError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class IngestReport:
    rows_read: int = 0
    rejected: int = 0
    feature_names: list = field(default_factory=list)
    label_values: list = field(default_factory=list)
    categorical_maps: dict = field(default_factory=dict)


def _sort_key(values: Sequence[str]):
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def load_csv(
    path,
    label_column: str,
    categorical_columns: Sequence[str] = (),
) -> tuple[Dataset, IngestReport]:
    """Read a headed CSV into an unscaled :class:`Dataset`.

    Categorical columns get ordinal codes in order of first appearance. Labels
    are mapped to ``0..C-1`` by sorted distinct value (numerically when every
    label parses as a number). Rows with a missing cell are dropped and
    counted in the report.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]

    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header {header}")
    cat = set(categorical_columns)
    unknown = cat - set(header)
    if unknown:
        raise DataError(f"{path}: categorical columns {sorted(unknown)} not in header")
    label_idx = header.index(label_column)
    feat_idx = [i for i in range(len(header)) if i != label_idx]

    report = IngestReport(rows_read=len(rows), feature_names=[header[i] for i in feat_idx])
    kept = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        cells = [c.strip() for c in row]
        if any(c in _MISSING for c in cells):
            report.rejected += 1
            continue
        kept.append((lineno, cells))
    if not kept:
        raise DataError(f"{path}: no complete rows")

    codes: dict[str, dict[str, int]] = {header[i]: {} for i in feat_idx if header[i] in cat}
    X = np.empty((len(kept), len(feat_idx)), dtype=np.float64)
    for r, (lineno, cells) in enumerate(kept):
        for c, i in enumerate(feat_idx):
            name = header[i]
            if name in codes:
                X[r, c] = codes[name].setdefault(cells[i], len(codes[name]))
                continue
            try:
                v = float(cells[i])
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: column {name!r} has unparseable number {cells[i]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: column {name!r} is not finite")
            X[r, c] = v

    raw_labels = [cells[label_idx] for _, cells in kept]
    distinct = _sort_key(set(raw_labels))
    if len(distinct) < 2:
        raise DataError(f"{path}: label column {label_column!r} has a single class")
    mapping = {v: k for k, v in enumerate(distinct)}
    y = np.array([mapping[v] for v in raw_labels], dtype=np.int64)

    report.label_values = distinct
    report.categorical_maps = codes
    if report.rejected:
        logger.info("%s: dropped %d rows with missing values", path, report.rejected)
    return Dataset(X, y, len(distinct)), report


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.d)] + [label_column])
        for row, label in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be positive and sum to 1, got {fracs}")


def holdout_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """(train, val, test) sizes for ``n`` rows.

    When both holdout fractions equal 1/k for an integer k, the holdouts are
    the first two folds of a k-fold partition (fold sizes ``n // k``, the
    first ``n % k`` folds one larger). Otherwise sizes are ``round(n * frac)``.
    Leftover rows go to train either way.
    """
    k = 1.0 / spec.test_frac
    if spec.val_frac == spec.test_frac and abs(k - round(k)) < 1e-9:
        k = int(round(k))
        base, rem = divmod(n, k)
        test = base + (rem > 0)
        val = base + (rem > 1)
    else:
        test = int(round(n * spec.test_frac))
        val = int(round(n * spec.val_frac))
    return n - val - test, val, test


def _allocate(counts: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Per-class part sizes: a (classes x parts) integer table with the given margins.

    Every cell is the floor or ceiling of its exact share ``count * size / n``
    (controlled rounding). Leftover units go to the cells with the largest
    fractional parts; if that greedy pass strands a unit, the leftovers are
    re-placed row by row onto the parts with the most outstanding demand,
    which always completes for a table with these margins.
    """
    counts = np.asarray(counts, dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)
    exact = np.outer(counts, sizes) / counts.sum()
    base = np.floor(exact).astype(np.int64)
    frac = exact - base
    row_need = counts - base.sum(axis=1)
    col_need = sizes - base.sum(axis=0)
    K, J = base.shape

    extra = np.zeros_like(base)
    r, c = row_need.copy(), col_need.copy()
    for _, j, k in sorted((-frac[k, j], j, k) for k in range(K) for j in range(J)):
        if r[k] > 0 and c[j] > 0:
            extra[k, j] += 1
            r[k] -= 1
            c[j] -= 1
    if r.any():
        extra = np.zeros_like(base)
        c = col_need.copy()
        for k in sorted(range(K), key=lambda k: (-row_need[k], k)):
            for j in sorted(range(J), key=lambda j: (-c[j], -frac[k, j], j))[: row_need[k]]:
                extra[k, j] += 1
                c[j] -= 1
        if c.any():
            raise RuntimeError("controlled rounding left parts unfilled")
    return base + extra


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test partition covering all rows."""
    n = dataset.n
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    n_train, n_val, n_test = holdout_sizes(n, spec)
    rng = np.random.default_rng(spec.seed)
    counts = dataset.class_counts()
    present = counts[counts > 0]

    stratified = spec.stratified
    if stratified and present.min() < 3:
        logger.warning("a class has fewer than 3 rows; splitting without stratification")
        stratified = False

    if stratified:
        table = _allocate(counts, (n_test, n_val, n_train))
        test_k, val_k = table[:, 0], table[:, 1]
        tr, va, te = [], [], []
        for k in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.y == k)
            idx = idx[rng.permutation(idx.size)]
            te.append(idx[: test_k[k]])
            va.append(idx[test_k[k] : test_k[k] + val_k[k]])
            tr.append(idx[test_k[k] + val_k[k] :])
        parts = [np.sort(np.concatenate(p)) for p in (tr, va, te)]
    else:
        perm = rng.permutation(n)
        parts = [np.sort(perm[n_test + n_val :]), np.sort(perm[n_test : n_test + n_val]), np.sort(perm[:n_test])]
    return tuple(dataset.subset(p) for p in parts)


# ---------------------------------------------------------------------------
# scaling


@dataclass
class Normalizer:
    """Per-column z-scoring with statistics frozen from a reference set.

    Columns that are constant in the reference set map to zero.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        constant = self.std == 0
        scale = np.where(constant, 0.0, 1.0 / np.where(constant, 1.0, self.std))
        return (X - self.mean) * scale

    def apply(self, dataset: Dataset) -> Dataset:
        return Dataset(self.transform(dataset.X), dataset.y, dataset.num_classes)


def zscore(dataset: Dataset) -> Dataset:
    return Normalizer.fit(dataset.X).apply(dataset)


def normalize_splits(train: Dataset, *others: Dataset) -> tuple:
    norm = Normalizer.fit(train.X)
    return (norm.apply(train),) + tuple(norm.apply(d) for d in others)


def read_labeled_csv(path, label_column: str = "label", num_classes: Optional[int] = None) -> Dataset:
    """Read a numeric CSV whose label column already holds integer class ids."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    try:
        values = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError(f"{path}: no rows")
    labels = values[:, li]
    if not np.array_equal(labels, np.round(labels)):
        raise DataError(f"{path}: labels must be integers")
    X = np.delete(values, li, axis=1)
    return Dataset(X, labels.astype(np.int64), num_classes)
