"""Reconstruction with an auxiliary dataset: learn Shapley vector -> input."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.base import RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from shapleak import _nn
from shapleak.models.base import SerializableModel, register

log = logging.getLogger(__name__)


class PartialPairsWarning(UserWarning):
    """Fewer pairs than requested (budget ran out or collisions were dropped)."""


def drop_collisions(S, X):
    """Remove every pair whose Shapley vector occurs more than once (exact equality)."""
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if S.shape[0] != X.shape[0]:
        raise ValueError("S and X must have the same number of rows")
    if S.shape[0] == 0:
        return S, X, 0
    # NaN-withheld cells compare equal to each other for collision purposes
    key = np.where(np.isnan(S), np.inf, S)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    keep = counts[inverse.ravel()] == 1
    return S[keep], X[keep], int((~keep).sum())


def build_pairs(X_aux, client, fill_value=0.0):
    """Query explanations for every auxiliary row and align them with the rows.

    ``client`` needs a ``batch_explain(X)`` returning explanations in input
    order; a budget failure part-way keeps the answered prefix and warns.
    Withheld (top-k) entries are filled with ``fill_value``.
    """
    from shapleak.service import BatchError

    X_aux = np.asarray(getattr(X_aux, "features", X_aux), dtype=np.float64)
    try:
        expl = client.batch_explain(X_aux)
    except BatchError as exc:
        expl = exc.completed
        warnings.warn(f"explanation batch stopped after {len(expl)} of {len(X_aux)} rows: {exc}",
                      PartialPairsWarning, stacklevel=2)
    if not expl:
        return np.empty((0, X_aux.shape[1])), np.empty((0, X_aux.shape[1]))
    S = np.vstack([e.filled(fill_value) for e in expl])
    S, X, dropped = drop_collisions(S, X_aux[:len(expl)])
    if dropped:
        warnings.warn(f"dropped {dropped} pairs with colliding Shapley vectors",
                      PartialPairsWarning, stacklevel=2)
    return S, X


@register
class InverseMappingAttack(RegressorMixin, SerializableModel):
    """Sigmoid MLP ``psi: s -> x`` with one hidden layer of ``hidden_factor * n`` units.

    Weights start from a seeded standard normal. Training is mini-batch
    gradient descent on the squared reconstruction error summed over the
    batch, plus L2 weight decay on the weight matrices. Inputs are
    standardized with statistics fitted on the auxiliary explanations.
    """

    kind = "attack-mlp"

    def __init__(self, hidden_factor=4, learning_rate=0.05, epochs=1000, batch_size=32,
                 weight_decay=1e-4, standardize=True, random_state=0):
        self.hidden_factor = hidden_factor
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.random_state = random_state

    def _scale(self, S):
        return (S - self.input_mean_) / self.input_scale_

    def fit(self, S, X):
        S = check_array(S, dtype=np.float64)
        X = check_array(X, dtype=np.float64)
        if S.shape[0] != X.shape[0]:
            raise ValueError("S and X must have the same number of rows")
        if S.shape[0] < 2:
            raise ValueError("need at least 2 (explanation, input) pairs")
        m, n_in = S.shape
        n_out = X.shape[1]
        if self.standardize:
            self.input_mean_ = S.mean(axis=0)
            sd = S.std(axis=0)
            self.input_scale_ = np.where(sd > 0, sd, 1.0)
        else:
            self.input_mean_, self.input_scale_ = np.zeros(n_in), np.ones(n_in)
        Z = self._scale(S)
        rng = np.random.default_rng(self.random_state)
        sizes = [n_in, self.hidden_factor * n_in, n_out]
        W, b = _nn.init_normal(sizes, rng)
        self.loss_curve_ = []
        lam = self.weight_decay
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(m)
            for start in range(0, m, self.batch_size):
                idx = perm[start:start + self.batch_size]
                acts, masks = _nn.forward(Z[idx], W, b, "sigmoid", "sigmoid")
                out = acts[-1]
                # d/dz of sum (out - x)^2 through the sigmoid head
                delta = 2.0 * (out - X[idx]) * out * (1.0 - out)
                gW, gb = _nn.backward(acts, masks, W, delta, "sigmoid")
                for li in range(len(W)):
                    W[li] -= self.learning_rate * (gW[li] + 2.0 * lam * W[li])
                    b[li] -= self.learning_rate * gb[li]
            loss = self._loss(Z, X, W, b)
            if not np.isfinite(loss):
                raise _nn.TrainingDivergedError(epoch, loss)
            self.loss_curve_.append(loss)
        self.coefs_, self.intercepts_ = W, b
        self.n_features_in_ = n_in
        self.n_outputs_ = n_out
        self.train_meta_ = {"seed": self.random_state, "n_pairs": m,
                            "learning_rate": self.learning_rate, "epochs": self.epochs,
                            "batch_size": self.batch_size, "weight_decay": self.weight_decay}
        log.debug("inverse model trained on %d pairs, final loss %.5f", m, self.loss_curve_[-1]
                  if self.loss_curve_ else float("nan"))
        return self

    def _loss(self, Z, X, W, b):
        acts, _ = _nn.forward(Z, W, b, "sigmoid", "sigmoid")
        return float(np.mean((acts[-1] - X) ** 2))

    def training_loss(self, S, X) -> float:
        """Mean squared reconstruction error of the fitted model on ``(S, X)``."""
        check_is_fitted(self)
        return self._loss(self._scale(np.asarray(S, dtype=np.float64)),
                          np.asarray(X, dtype=np.float64), self.coefs_, self.intercepts_)

    def predict(self, S):
        check_is_fitted(self)
        S = check_array(S, dtype=np.float64, ensure_2d=False)
        if S.ndim == 1:
            S = S[None, :]
        if S.shape[1] != self.n_features_in_:
            raise ValueError(f"dimension mismatch: expected {self.n_features_in_} Shapley values, "
                             f"got {S.shape[1]}")
        acts, _ = _nn.forward(self._scale(S), self.coefs_, self.intercepts_, "sigmoid", "sigmoid")
        return acts[-1]

    def reconstruct(self, explanation, fill_value=0.0) -> np.ndarray:
        """Reconstruct one input from an :class:`~shapleak.explain.Explanation` or vector."""
        s = explanation.filled(fill_value) if hasattr(explanation, "filled") else explanation
        return self.predict(np.asarray(s, dtype=np.float64)[None, :])[0]

    def _n_outputs(self):
        return int(self.n_outputs_)

    def _get_state(self):
        return {"coefs": self.coefs_, "intercepts": self.intercepts_,
                "input_mean": self.input_mean_, "input_scale": self.input_scale_,
                "n_outputs": self.n_outputs_}

    def _set_state(self, state):
        self.coefs_ = [np.asarray(w, dtype=np.float64) for w in state["coefs"]]
        self.intercepts_ = [np.asarray(v, dtype=np.float64) for v in state["intercepts"]]
        self.input_mean_ = np.asarray(state["input_mean"], dtype=np.float64)
        self.input_scale_ = np.asarray(state["input_scale"], dtype=np.float64)
        self.n_outputs_ = int(state["n_outputs"])


def train_inverse(S, X, learning_rate=0.05, epochs=1000, batch_size=32, weight_decay=1e-4,
                  seed=0) -> InverseMappingAttack:
    return InverseMappingAttack(learning_rate=learning_rate, epochs=epochs,
                                batch_size=batch_size, weight_decay=weight_decay,
                                random_state=seed).fit(S, X)


def reconstruct(psi: InverseMappingAttack, s) -> np.ndarray:
    return psi.reconstruct(s)
