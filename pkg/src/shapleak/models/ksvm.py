from __future__ import annotations

import numpy as np

from shapleak._nn import TrainingDivergedError, softmax
from shapleak.models.base import TargetClassifier, register


def rbf_kernel(A, B, gamma):
    sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


@register
class KernelSVMClassifier(TargetClassifier):
    """One-vs-rest RBF-kernel SVM trained with kernelized Pegasos.

    Each class gets a hinge-loss scorer over a seeded subsample of at most
    ``max_support`` training rows. Probabilities are the softmax of
    ``log prior_k + g_k(x) - mean_train g_k``; centering the kernel score
    makes the degenerate all-ones kernel (``gamma -> 0``) return the prior.
    """

    kind = "KSVM"

    def __init__(self, gamma=1.0, regularization=1e-3, epochs=50, max_support=500,
                 random_state=0):
        self.gamma = gamma
        self.regularization = regularization
        self.epochs = epochs
        self.max_support = max_support
        self.random_state = random_state

    def fit(self, X, y, n_classes=None):
        X, y = self._validate_fit(X, y, n_classes)
        if self.regularization <= 0:
            raise ValueError("regularization must be positive")
        rng = np.random.default_rng(self.random_state)
        m = X.shape[0]
        rows = np.sort(rng.choice(m, size=min(m, self.max_support), replace=False))
        S, ys = X[rows], y[rows]
        K = rbf_kernel(S, S, self.gamma)
        c, p = self.n_classes_, S.shape[0]
        signs = np.where(ys[None, :] == np.arange(c)[:, None], 1.0, -1.0)  # (c, p)
        counts = np.zeros((c, p))
        lam = self.regularization
        t = 0
        for epoch in range(1, self.epochs + 1):
            for i in rng.permutation(p):
                t += 1
                # margin of every class scorer on support row i, using step-t weights
                margins = signs[:, i] * ((counts * signs) @ K[:, i]) / (lam * t)
                counts[:, i] += margins < 1.0
            if not np.all(np.isfinite(counts)):
                raise TrainingDivergedError(epoch, float("nan"))
        self.support_vectors_ = S
        self.dual_coef_ = counts * signs / (lam * max(t, 1))
        self.train_meta_ = {"seed": self.random_state, "support_rows": rows.tolist()}
        prior = np.bincount(y, minlength=c) / m
        self.log_prior_ = np.log(np.clip(prior, 1e-12, None))
        self.score_offset_ = np.zeros(c)
        self.score_offset_ = self._raw_scores(X).mean(axis=0)
        return self

    def _raw_scores(self, X):
        return rbf_kernel(X, self.support_vectors_, self.gamma) @ self.dual_coef_.T

    def decision_function(self, X):
        X = self._validate_predict(X)
        return self.log_prior_ + self._raw_scores(X) - self.score_offset_

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def _get_weights(self):
        return {"support_vectors": self.support_vectors_, "dual_coef": self.dual_coef_,
                "log_prior": self.log_prior_, "score_offset": self.score_offset_}

    def _set_weights(self, state):
        self.support_vectors_ = np.asarray(state["support_vectors"], dtype=np.float64)
        self.dual_coef_ = np.asarray(state["dual_coef"], dtype=np.float64)
        self.log_prior_ = np.asarray(state["log_prior"], dtype=np.float64)
        self.score_offset_ = np.asarray(state["score_offset"], dtype=np.float64)
