"""Black-box target classifiers and their JSON model files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shapleak._nn import TrainingDivergedError
from shapleak.models.base import (
    ModelFormatError,
    TargetClassifier,
    dumps_model,
    load_model,
    loads_model,
    save_model,
)
from shapleak.models.ksvm import KernelSVMClassifier
from shapleak.models.mlp import MLPClassifier
from shapleak.models.trees import (
    DegenerateTrainingWarning,
    GBDTClassifier,
    RandomForestClassifier,
)

MODEL_KINDS = {
    "MLP": MLPClassifier,
    "RF": RandomForestClassifier,
    "GBDT": GBDTClassifier,
    "KSVM": KernelSVMClassifier,
}


@dataclass(frozen=True)
class MlpArch:
    """Hidden widths default to ``(2n, 2n)`` when ``hidden`` is None."""

    hidden: tuple[int, ...] | None = None
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.hidden is not None and any(h <= 0 for h in self.hidden):
            raise ValueError("layer widths must be positive")


def train_mlp(train, arch: MlpArch = MlpArch(), epochs=200, learning_rate=0.05,
              batch_size=64, seed=0) -> MLPClassifier:
    model = MLPClassifier(hidden_layer_sizes=arch.hidden, activation=arch.activation,
                          dropout_rate=arch.dropout_rate, learning_rate=learning_rate,
                          epochs=epochs, batch_size=batch_size, random_state=seed)
    return model.fit(train.features, train.labels, n_classes=train.n_classes)


def train_rf(train, n_trees=100, max_depth=5, seed=0) -> RandomForestClassifier:
    model = RandomForestClassifier(n_trees=n_trees, max_depth=max_depth, random_state=seed)
    return model.fit(train.features, train.labels, n_classes=train.n_classes)


def train_gbdt(train, n_trees=100, max_depth=3, shrinkage=0.1, seed=0) -> GBDTClassifier:
    model = GBDTClassifier(n_trees=n_trees, max_depth=max_depth, shrinkage=shrinkage,
                           random_state=seed)
    return model.fit(train.features, train.labels, n_classes=train.n_classes)


def train_ksvm(train, gamma=1.0, regularization=1e-3, seed=0) -> KernelSVMClassifier:
    model = KernelSVMClassifier(gamma=gamma, regularization=regularization, random_state=seed)
    return model.fit(train.features, train.labels, n_classes=train.n_classes)


def train_model(kind: str, train, seed=0, **params) -> TargetClassifier:
    """Build a target of the given kind from keyword hyper-parameters."""
    try:
        cls = MODEL_KINDS[kind.upper()]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    model = cls(random_state=seed, **params)
    return model.fit(train.features, train.labels, n_classes=train.n_classes)


def predict(model: TargetClassifier, x) -> np.ndarray:
    """Probability vector for a single sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes one sample; use model.predict_proba for batches")
    return model.predict_proba(x[None, :])[0]


__all__ = [
    "MODEL_KINDS",
    "MlpArch",
    "MLPClassifier",
    "RandomForestClassifier",
    "GBDTClassifier",
    "KernelSVMClassifier",
    "TargetClassifier",
    "ModelFormatError",
    "TrainingDivergedError",
    "DegenerateTrainingWarning",
    "train_mlp",
    "train_rf",
    "train_gbdt",
    "train_ksvm",
    "train_model",
    "predict",
    "save_model",
    "load_model",
    "dumps_model",
    "loads_model",
]
