"""Dataset ingestion, min-max scaling, splitting and the synthetic generator."""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

DATASET_FORMAT = "shapleak.dataset"
DATASET_VERSION = 1


class DataError(ValueError):
    """Raised for unusable input data (bad CSV, too few rows, bad config)."""


class ConstantInputWarning(RuntimeWarning):
    """A correlation was requested for a constant vector; 0 was returned."""


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable ``m x n`` feature matrix with integer class labels.

    ``normalization`` holds the per-feature ``min``/``max`` used to map raw
    values into ``[0, 1]`` (``None`` for raw data), ``meta`` is free-form
    provenance (generator settings, cube vertices, feature roles).
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    n_classes: int
    normalization: dict[str, np.ndarray] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.features, np.float64)
        y = _frozen(self.labels, np.int64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-d matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"expected {X.shape[0]} labels, got shape {y.shape}")
        if self.n_classes < 1:
            raise DataError("n_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels must lie in [0, n_classes)")
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != X.shape[1]:
            raise DataError(f"expected {X.shape[1]} feature names, got {len(names)}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)
        if self.normalization is not None:
            rec = {k: _frozen(v, np.float64) for k, v in self.normalization.items()}
            object.__setattr__(self, "normalization", rec)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.features[rows],
            self.labels[rows],
            self.feature_names,
            self.n_classes,
            self.normalization,
            dict(self.meta),
        )

    def to_dict(self) -> dict:
        norm = None
        if self.normalization is not None:
            norm = {k: v.tolist() for k, v in self.normalization.items()}
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "feature_names": list(self.feature_names),
            "n_classes": int(self.n_classes),
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "normalization": norm,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        if d.get("format") != DATASET_FORMAT:
            raise DataError(f"not a dataset file (format={d.get('format')!r})")
        if d.get("version") != DATASET_VERSION:
            raise DataError(f"unsupported dataset version {d.get('version')!r}")
        n = len(d["feature_names"])
        X = np.asarray(d["features"], dtype=np.float64).reshape(-1, n)
        return cls(X, d["labels"], d["feature_names"], d["n_classes"],
                   d.get("normalization"), d.get("meta") or {})


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(json.dumps(d.to_dict()))


def load_dataset(path) -> Dataset:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed dataset file: {exc}") from exc
    return Dataset.from_dict(payload)


def save_csv(d: Dataset, path, label_column: str = "label") -> None:
    """Write features plus a trailing integer label column, readable by :func:`load_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*d.feature_names, label_column])
        for x, y in zip(d.features, d.labels):
            w.writerow([*(repr(float(v)) for v in x), int(y)])


def load_csv(path, label_column: str = "label") -> Dataset:
    """Read a numeric CSV with a header row; ``label_column`` holds the class.

    Labels that all parse as non-negative integers are used as class indices;
    otherwise the distinct label strings are indexed in sorted order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: header but no data rows")
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header")
    li = header.index(label_column)
    names = [h for j, h in enumerate(header) if j != li]
    if not names:
        raise DataError(f"{path}: no feature columns")

    X = np.empty((len(body), len(names)))
    raw_labels = []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{r}: expected {len(header)} cells, got {len(row)}")
        raw_labels.append(row[li].strip())
        cells = [c for j, c in enumerate(row) if j != li]
        for j, cell in enumerate(cells):
            try:
                X[r - 2, j] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}:{r}: non-numeric value {cell!r} in column {names[j]!r}"
                ) from None
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-numeric (nan/inf) values present")

    try:
        y = np.array([int(v) for v in raw_labels])
        if y.min() < 0:
            raise ValueError
        n_classes = int(y.max()) + 1
        classes = None
    except ValueError:
        classes = sorted(set(raw_labels))
        lookup = {c: i for i, c in enumerate(classes)}
        y = np.array([lookup[v] for v in raw_labels])
        n_classes = len(classes)
    meta = {"source": str(path), "label_column": label_column}
    if classes is not None:
        meta["classes"] = classes
    return Dataset(X, y, names, n_classes, meta=meta)


def normalize_minmax(d: Dataset) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Scale each feature into [0, 1]; constant features map to 0.

    Returns the scaled dataset and the ``{"min", "max"}`` record needed by
    :func:`denormalize`.
    """
    X = d.features
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    flat = span <= 0
    Z = (X - lo) / np.where(flat, 1.0, span)
    Z[:, flat] = 0.0
    np.clip(Z, 0.0, 1.0, out=Z)
    record = {"min": lo, "max": hi}
    return (
        Dataset(Z, d.labels, d.feature_names, d.n_classes, record, dict(d.meta)),
        {k: v.copy() for k, v in record.items()},
    )


def denormalize(d: Dataset, record: dict[str, np.ndarray] | None = None) -> Dataset:
    record = record if record is not None else d.normalization
    if record is None:
        raise DataError("dataset carries no normalization record")
    lo, hi = np.asarray(record["min"]), np.asarray(record["max"])
    X = lo + d.features * (hi - lo)
    return Dataset(X, d.labels, d.feature_names, d.n_classes, None, dict(d.meta))


@dataclass(frozen=True, eq=False)
class Split:
    """60/20/20 train/auxiliary/validation partition of one dataset."""

    train: Dataset
    aux: Dataset
    val: Dataset
    seed: int
    train_idx: np.ndarray
    aux_idx: np.ndarray
    val_idx: np.ndarray


def split(d: Dataset, seed: int = 0) -> Split:
    """Shuffle rows and cut ``floor(0.6 m)`` / ``floor(0.2 m)`` / remainder."""
    m = d.n_samples
    if m < 5:
        raise DataError(f"dataset too small to split ({m} rows, need >= 5)")
    perm = np.random.default_rng(seed).permutation(m)
    n_train, n_aux = (6 * m) // 10, (2 * m) // 10
    idx = (perm[:n_train], perm[n_train:n_train + n_aux], perm[n_train + n_aux:])
    return Split(*(d.subset(i) for i in idx), seed, *idx)


@dataclass(frozen=True)
class SynthConfig:
    n_features: int = 12
    important_fraction: float = 0.5
    n_samples: int = 10_000
    cluster_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.important_fraction not in (0.25, 0.5, 0.75):
            raise DataError(
                f"important_fraction must be one of 0.25, 0.5, 0.75, got {self.important_fraction}"
            )
        if self.n_important < 3:
            raise DataError("important_fraction * n_features must be >= 3")
        if self.n_samples < 1 or self.cluster_std < 0:
            raise DataError("n_samples must be >= 1 and cluster_std >= 0")

    @property
    def n_important(self) -> int:
        return int(round(self.important_fraction * self.n_features))

    @property
    def n_redundant(self) -> int:
        return self.n_important - 3

    @property
    def n_noise(self) -> int:
        return self.n_features - self.n_important


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Five Gaussian clusters on unit-cube vertices plus redundant and noise columns.

    Columns are ordered key (3), redundant, noise. Key columns are min-max
    scaled after sampling so no mass piles up on the cube faces; redundant
    columns are convex combinations of the scaled key columns, so they stay
    in [0, 1] without clipping. Noise columns are i.i.d. U(0, 1).
    """
    rng = np.random.default_rng(cfg.seed)
    vertices = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    centers = vertices[rng.permutation(8)[:5]]
    y = rng.integers(0, 5, size=cfg.n_samples)
    key = centers[y] + rng.normal(0.0, 1.0, size=(cfg.n_samples, 3)) * cfg.cluster_std
    lo, hi = key.min(axis=0), key.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    key = (key - lo) / span

    weights = rng.dirichlet(np.ones(3), size=cfg.n_redundant)
    redundant = key @ weights.T
    noise = rng.uniform(0.0, 1.0, size=(cfg.n_samples, cfg.n_noise))
    X = np.clip(np.hstack([key, redundant, noise]), 0.0, 1.0)

    names = ([f"key_{i}" for i in range(3)]
             + [f"redundant_{i}" for i in range(cfg.n_redundant)]
             + [f"noise_{i}" for i in range(cfg.n_noise)])
    meta = {
        "generator": "synthetic",
        "config": {
            "n_features": cfg.n_features,
            "important_fraction": cfg.important_fraction,
            "n_samples": cfg.n_samples,
            "cluster_std": cfg.cluster_std,
            "seed": cfg.seed,
        },
        "cluster_centers": centers.tolist(),
        "redundant_weights": weights.tolist(),
        "roles": ["key"] * 3 + ["redundant"] * cfg.n_redundant + ["noise"] * cfg.n_noise,
    }
    return Dataset(X, y, names, 5, meta=meta)


def pearson(x, y) -> float:
    """Sample Pearson correlation; 0.0 (with a warning) if either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("constant input; correlation undefined, returning 0",
                      ConstantInputWarning, stacklevel=2)
        return 0.0
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def macc(feature, predictions) -> float:
    """Mean absolute correlation between one feature column and each output column."""
    feature = np.asarray(feature, dtype=np.float64)
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] != feature.shape[0]:
        raise ValueError(f"shape mismatch: {feature.shape[0]} rows vs {P.shape[0]} predictions")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstantInputWarning)
        return float(np.mean([abs(pearson(feature, P[:, j])) for j in range(P.shape[1])]))
