from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

MODEL_FORMAT = "shapleak.model"
MODEL_VERSION = 1

_REGISTRY: dict[str, type] = {}


class ModelFormatError(ValueError):
    """Unreadable, truncated, wrong-version or wrong-kind model file."""


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


class SerializableModel(BaseEstimator):
    """Mixin for estimators persisted as versioned JSON.

    Subclasses set ``kind`` and implement ``_get_state`` / ``_set_state``
    over their fitted attributes.
    """

    kind: str = ""

    def _get_state(self) -> dict:
        raise NotImplementedError

    def _set_state(self, state: dict) -> None:
        raise NotImplementedError

    def to_dict(self) -> dict:
        check_is_fitted(self)
        return _to_jsonable({
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "n_inputs": self.n_features_in_,
            "n_outputs": self._n_outputs(),
            "params": self.get_params(),
            "train_meta": getattr(self, "train_meta_", {}),
            "state": self._get_state(),
        })

    def _n_outputs(self) -> int:
        return int(self.n_classes_)

    @classmethod
    def from_dict(cls, d: dict):
        model = cls(**d["params"])
        model.n_features_in_ = int(d["n_inputs"])
        model.train_meta_ = d.get("train_meta", {})
        model._set_state(d["state"])
        return model


class TargetClassifier(ClassifierMixin, SerializableModel):
    """Black-box target: ``predict_proba`` maps [0,1]^n to a length-c simplex vector."""

    def _validate_fit(self, X, y, n_classes):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError(f"expected {X.shape[0]} labels, got shape {y.shape}")
        if n_classes is None:
            n_classes = int(y.max()) + 1
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
        self.n_features_in_ = X.shape[1]
        self.n_classes_ = int(n_classes)
        self.classes_ = np.arange(self.n_classes_)
        return X, y

    def _validate_predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"dimension mismatch: model takes {self.n_features_in_} features, got {X.shape[1]}"
            )
        return X

    def predict_proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def _get_state(self):
        return {"n_classes": self.n_classes_, **self._get_weights()}

    def _set_state(self, state):
        self.n_classes_ = int(state["n_classes"])
        self.classes_ = np.arange(self.n_classes_)
        self._set_weights(state)


def dumps_model(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)


def save_model(model, path) -> None:
    Path(path).write_text(dumps_model(model))


def loads_model(text: str, kind: str | None = None):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    if kind is not None and d.get("kind") != kind:
        raise ModelFormatError(f"kind mismatch: expected {kind!r}, file holds {d.get('kind')!r}")
    cls = _REGISTRY.get(d.get("kind"))
    if cls is None:
        raise ModelFormatError(f"unknown model kind {d.get('kind')!r}")
    try:
        return cls.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model payload: {exc}") from exc


def load_model(path, kind: str | None = None):
    return loads_model(Path(path).read_text(), kind=kind)
