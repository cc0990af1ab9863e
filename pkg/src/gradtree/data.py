"""Dataset ingestion, normalization, splits, and synthetic tree generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .trees import ObliqueTree


@dataclass(frozen=True)
class NormStats:
    """Normalization statistics, fit on training rows only.

    Features are z-scored (constant columns are centered but left unscaled);
    regression targets are min-max mapped to [0, 1].  ``target_min/max`` are
    None for classification.
    """

    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_min: float | None = None
    target_max: float | None = None

    def transform_target(self, y):
        if self.target_min is None:
            return np.asarray(y)
        return (np.asarray(y, dtype=float) - self.target_min) / (self.target_max - self.target_min)

    def inverse_target(self, y):
        if self.target_min is None:
            return np.asarray(y)
        return np.asarray(y, dtype=float) * (self.target_max - self.target_min) + self.target_min

    def transform_features(self, X):
        return (np.asarray(X, dtype=float) - self.feature_mean) / self.feature_scale


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels (scalar targets or integer class indices).

    ``norm`` records the stats the dataset has already been transformed
    with, or None for raw data.
    """

    features: np.ndarray
    labels: np.ndarray
    norm: NormStats | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError("dataset needs a non-empty 2-D feature matrix")
        if self.labels.shape[0] != self.features.shape[0]:
            raise DataError("label count does not match row count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.norm)


def _read_numeric_csv(path, has_header: bool):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise DataError(f"{path}: empty file")

    header = None
    if has_header:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: no data rows after header")

    ncols = len(rows[0])
    data = np.empty((len(rows), ncols))
    for r, row in enumerate(rows):
        if len(row) != ncols:
            raise DataError(
                f"{path}: row {r + 1 + bool(has_header)} has {len(row)} fields, expected {ncols}"
            )
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {cell!r} at row "
                    f"{r + 1 + bool(has_header)}, column {c + 1}"
                ) from None
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite value in data")
    return header, data


def _column_index(column, header, ncols, path):
    if isinstance(column, str):
        if header is None:
            raise DataError("column by name requires a header")
        try:
            return header.index(column)
        except ValueError:
            raise DataError(f"column {column!r} not found in header") from None
    idx = int(column)
    if not -ncols <= idx < ncols:
        raise DataError(f"{path}: column index {idx} out of range for {ncols} columns")
    return idx % ncols


def load_csv(path, label_column=-1, has_header: bool = True) -> Dataset:
    """Load a numeric CSV into a Dataset.

    ``label_column`` is an index (negative allowed) or, with a header, a
    column name.  Categorical encoding is the caller's preprocessing.
    """
    header, data = _read_numeric_csv(path, has_header)
    label_idx = _column_index(label_column, header, data.shape[1], path)
    features = np.delete(data, label_idx, axis=1)
    return Dataset(features=features, labels=data[:, label_idx])


def load_feature_csv(path, has_header: bool = True, drop_column=None) -> np.ndarray:
    """Load unlabeled prediction input; optionally drop a label column the
    file happens to carry."""
    header, data = _read_numeric_csv(path, has_header)
    if drop_column is not None:
        data = np.delete(data, _column_index(drop_column, header, data.shape[1], path), axis=1)
    return data


def fit_normalization(train: Dataset, task: str = "reg") -> NormStats:
    """Fit z-score feature stats (and target min/max for regression) on the
    training rows."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    scale = np.where(std == 0, 1.0, std)  # constant columns: center only
    if task == "reg":
        lo, hi = float(train.labels.min()), float(train.labels.max())
        if lo == hi:
            raise DataError("degenerate regression target: min equals max")
        return NormStats(mean, scale, lo, hi)
    return NormStats(mean, scale)


def apply_normalization(ds: Dataset, stats: NormStats) -> Dataset:
    """Apply previously-fit stats.  Re-applying the same stats is a no-op."""
    if ds.norm is stats:
        return ds
    labels = ds.labels
    if stats.target_min is not None:
        labels = stats.transform_target(labels)
    return Dataset(stats.transform_features(ds.features), labels, norm=stats)


def fit_apply_normalization(train: Dataset, others=(), task: str = "reg"):
    """Fit on `train`, apply to `train` and every dataset in `others`.

    Returns ``(train_normalized, [others_normalized], stats)``; metrics should
    be reported after mapping predictions back through ``stats``.
    """
    stats = fit_normalization(train, task)
    return (
        apply_normalization(train, stats),
        [apply_normalization(ds, stats) for ds in others],
        stats,
    )


def split(data: Dataset, ratios, seed: int = 0):
    """Seeded shuffle then contiguous partition into (train, val, test).

    Sizes are floor-based for val/test with the remainder going to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    n = data.n
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise DataError(f"split of {n} rows by {ratios} leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    return (
        data.take(order[:n_train]),
        data.take(order[n_train : n_train + n_val]),
        data.take(order[n_train + n_val :]),
    )


@dataclass(frozen=True)
class OracleTreeSpec:
    """Recipe for a random ground-truth oblique tree plus sampled data.

    Regression leaf values are a random permutation of an even grid spanning
    [0, 1], so the raw targets are already unit-scaled and every region is
    distinguishable.  Classification leaves are one-hot score vectors
    covering all ``num_classes`` classes.
    """

    height: int
    input_dim: int
    task: str = "reg"
    num_classes: int = 1
    noise: float = 0.0

    def __post_init__(self):
        if self.task not in ("reg", "clf"):
            raise ConfigError(f"task must be 'reg' or 'clf', got {self.task!r}")
        if self.task == "clf" and not 2 <= self.num_classes <= 2**self.height:
            raise ConfigError("num_classes must be in [2, 2^height] for classification")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def _draw_oracle_tree(spec: OracleTreeSpec, rng, X) -> ObliqueTree:
    # predicates drawn top-down: random direction per node (kept at least
    # ~35 degrees away from the parent's so regions are not thin wedges),
    # cut placed at a random near-median quantile of the points reaching
    # the node, so every leaf keeps a reasonable share of the sample
    h, d = spec.height, spec.input_dim
    n_nodes = 2**h - 1
    min_sep = math.cos(math.radians(35.0))
    W = np.empty((n_nodes, d))
    b = np.empty(n_nodes)
    node_rows = {0: np.arange(X.shape[0])}
    for flat in range(n_nodes):
        rows = node_rows.pop(flat)
        parent = W[(flat - 1) // 2] if flat else None
        for _ in range(50):
            w = rng.normal(size=d)
            w /= np.linalg.norm(w)
            if parent is None or abs(w @ parent) <= min_sep:
                break
        if rows.size:
            proj = X[rows] @ w
            cut = float(np.quantile(proj, rng.uniform(0.35, 0.65)))
        else:
            proj = np.empty(0)
            cut = float(w @ rng.uniform(-0.6, 0.6, size=d))
        W[flat] = w
        b[flat] = -cut
        right = proj >= cut
        node_rows[2 * flat + 1] = rows[~right]
        node_rows[2 * flat + 2] = rows[right]
    if spec.task == "reg":
        # evenly spread values in a random order: targets span [0, 1] exactly
        # and no two regions are near-duplicates
        leaves = rng.permutation(np.linspace(0.0, 1.0, 2**h))[:, None]
    else:
        k = spec.num_classes
        classes = np.concatenate([rng.permutation(k), rng.integers(0, k, size=2**h - k)])
        classes = rng.permutation(classes)
        leaves = np.eye(k)[classes]
    return ObliqueTree(h, W, b, leaves)


def gen_oracle_tree(spec: OracleTreeSpec, n: int, seed: int = 0):
    """Sample `n` points uniform on [-1, 1]^d, labeled by a random oblique
    tree of the requested height.

    Predicates are redrawn (up to 100 attempts) until every leaf receives at
    least ``max(10, ceil(n / 2^(h+2)))`` points.  Regression labels get
    Gaussian noise of the requested level; classification labels are the
    routed leaf's class, noiseless.

    Returns ``(dataset, ground_truth_tree)``.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, spec.input_dim))
    need = max(10, int(np.ceil(n / 2 ** (spec.height + 2))))
    for _ in range(100):
        tree = _draw_oracle_tree(spec, rng, X)
        leaf_idx = tree.route_batch(X)
        counts = np.bincount(leaf_idx, minlength=2**spec.height)
        if counts.min() >= need:
            break
    else:
        raise ConfigError(
            f"could not draw predicates giving every leaf >= {need} of {n} points "
            f"in 100 attempts (height {spec.height}, dim {spec.input_dim})"
        )
    if spec.task == "reg":
        y = tree.leaves[leaf_idx, 0]
        if spec.noise > 0:
            y = y + spec.noise * rng.normal(size=n)
        return Dataset(X, y), tree
    return Dataset(X, tree.leaves[leaf_idx].argmax(axis=1)), tree


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def accuracy(predictions, targets) -> float:
    predictions = np.asarray(predictions).ravel()
    targets = np.asarray(targets).ravel()
    return float(np.mean(predictions == targets))
