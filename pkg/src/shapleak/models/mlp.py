from __future__ import annotations

import numpy as np

from shapleak import _nn
from shapleak.models.base import TargetClassifier, register


@register
class MLPClassifier(TargetClassifier):
    """Softmax MLP trained with mini-batch SGD on cross-entropy.

    ``hidden_layer_sizes=None`` means two hidden layers of width ``2n``.
    ``dropout_rate`` is applied after each hidden layer during training only.
    """

    kind = "MLP"

    def __init__(self, hidden_layer_sizes=None, activation="relu", dropout_rate=0.0,
                 learning_rate=0.05, epochs=200, batch_size=64, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _layer_sizes(self, n, c):
        hidden = self.hidden_layer_sizes
        if hidden is None:
            hidden = (2 * n, 2 * n)
        return [n, *[int(h) for h in hidden], c]

    def fit(self, X, y, n_classes=None):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in _nn.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        X, y = self._validate_fit(X, y, n_classes)
        rng = np.random.default_rng(self.random_state)
        sizes = self._layer_sizes(X.shape[1], self.n_classes_)
        W, b = _nn.init_glorot(sizes, rng)
        onehot = np.eye(self.n_classes_)[y]
        m = X.shape[0]
        self.loss_curve_ = []
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(m)
            total = 0.0
            for start in range(0, m, self.batch_size):
                idx = perm[start:start + self.batch_size]
                acts, masks = _nn.forward(X[idx], W, b, self.activation, "softmax",
                                          self.dropout_rate, rng)
                p = acts[-1]
                total += -np.sum(onehot[idx] * np.log(np.clip(p, 1e-300, None)))
                delta = (p - onehot[idx]) / len(idx)
                gW, gb = _nn.backward(acts, masks, W, delta, self.activation)
                for li in range(len(W)):
                    W[li] -= self.learning_rate * gW[li]
                    b[li] -= self.learning_rate * gb[li]
            loss = total / m
            if not np.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in W):
                raise _nn.TrainingDivergedError(epoch, loss)
            self.loss_curve_.append(float(loss))
        self.coefs_, self.intercepts_ = W, b
        self.train_meta_ = {"seed": self.random_state, "dropout_rate": self.dropout_rate,
                            "layer_sizes": sizes}
        return self

    def predict_proba(self, X):
        X = self._validate_predict(X)
        acts, _ = _nn.forward(X, self.coefs_, self.intercepts_, self.activation, "softmax")
        return acts[-1]

    def _get_weights(self):
        return {"coefs": self.coefs_, "intercepts": self.intercepts_}

    def _set_weights(self, state):
        self.coefs_ = [np.asarray(w, dtype=np.float64) for w in state["coefs"]]
        self.intercepts_ = [np.asarray(v, dtype=np.float64) for v in state["intercepts"]]
