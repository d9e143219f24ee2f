"""CART trees, a bagged random forest, and multiclass gradient boosting."""

from __future__ import annotations

import warnings

import numpy as np

from shapleak.models.base import TargetClassifier, register


class DegenerateTrainingWarning(UserWarning):
    """Training data had a single class; the fitted model is constant."""


class Tree:
    """Array-backed binary tree. ``feature == -1`` marks a leaf.

    Samples go left when ``x[feature] <= threshold``.
    """

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, feat, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"])


def _best_split(X, target, features, criterion, min_leaf):
    """Exhaustive search over midpoints between distinct sorted values.

    ``target`` is a one-hot matrix (gini) or a column vector (squared error).
    Ties resolve to the lowest feature index, then the lowest threshold,
    because candidates are scanned in that order and only a strict
    improvement replaces the incumbent.
    """
    m = X.shape[0]
    best = (np.inf, -1, 0.0)
    total = target.sum(axis=0)
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cum = np.cumsum(target[order], axis=0)
        n_left = np.arange(1, m)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (m - n_left >= min_leaf)
        if not valid.any():
            continue
        left = cum[:-1]
        right = total - left
        nl = n_left[:, None].astype(np.float64)
        nr = m - nl
        if criterion == "gini":
            # weighted gini = n_l (1 - sum p_l^2) + n_r (1 - sum p_r^2); constant terms dropped
            score = -(np.sum(left ** 2, axis=1) / nl[:, 0] + np.sum(right ** 2, axis=1) / nr[:, 0])
        else:
            # SSE = const - (S_l^2 / n_l + S_r^2 / n_r)
            score = -(left[:, 0] ** 2 / nl[:, 0] + right[:, 0] ** 2 / nr[:, 0])
        score = np.where(valid, score, np.inf)
        j = int(np.argmin(score))
        if score[j] < best[0]:
            best = (float(score[j]), f, 0.5 * (xs[j] + xs[j + 1]))
    return best


def build_tree(X, target, leaf_value, *, criterion, max_depth, max_features=None,
               rng=None, min_samples_leaf=1) -> Tree:
    """Greedy depth-first CART construction.

    ``leaf_value(rows)`` maps the row indices reaching a leaf to its stored
    value. With ``max_features`` set, each split considers a fresh random
    feature subset drawn from ``rng``.
    """
    n = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, None)):
            lst.append(v)
        return len(feature) - 1

    def grow(rows, depth):
        node = new_node()
        value[node] = leaf_value(rows)
        if depth >= max_depth or rows.size < 2 * min_samples_leaf:
            return node
        t = target[rows]
        if criterion == "gini" and np.count_nonzero(t.sum(axis=0)) < 2:
            return node
        if max_features is not None and max_features < n:
            feats = rng.choice(n, size=max_features, replace=False)
        else:
            feats = range(n)
        score, f, thr = _best_split(X[rows], t, feats, criterion, min_samples_leaf)
        if f < 0:
            return node
        if criterion == "mse":
            # no split improves on the parent's SSE
            s = t[:, 0].sum()
            if score >= -(s * s / rows.size) - 1e-12 * max(1.0, abs(s * s / rows.size)):
                return node
        mask = X[rows, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = grow(rows[mask], depth + 1)
        right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return Tree(feature, threshold, left, right, np.array(value, dtype=np.float64))


def _resolve_max_features(max_features, n):
    if max_features is None:
        return n
    if max_features == "sqrt":
        return max(1, int(np.sqrt(n)))
    if max_features == "log2":
        return max(1, int(np.log2(n)))
    return int(max_features)


@register
class RandomForestClassifier(TargetClassifier):
    """Bagged CART (gini) trees; ``predict_proba`` is the mean of hard per-tree votes."""

    kind = "RF"

    def __init__(self, n_trees=100, max_depth=5, max_features="sqrt", bootstrap=True,
                 random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y, n_classes=None):
        X, y = self._validate_fit(X, y, n_classes)
        c = self.n_classes_
        rng = np.random.default_rng(self.random_state)
        self.degenerate_ = np.unique(y).size == 1
        if self.degenerate_:
            warnings.warn("single-class training data; forest is a constant predictor",
                          DegenerateTrainingWarning, stacklevel=2)
        onehot = np.eye(c)[y]
        k = _resolve_max_features(self.max_features, X.shape[1])
        self.trees_ = []
        for _ in range(self.n_trees):
            rows = rng.integers(0, X.shape[0], X.shape[0]) if self.bootstrap else np.arange(X.shape[0])
            Xb, Tb = X[rows], onehot[rows]

            def majority(r, Tb=Tb):
                return float(np.argmax(Tb[r].sum(axis=0)))

            self.trees_.append(build_tree(Xb, Tb, majority, criterion="gini",
                                          max_depth=self.max_depth, max_features=k, rng=rng))
        self.train_meta_ = {"seed": self.random_state, "degenerate": bool(self.degenerate_)}
        return self

    def predict_proba(self, X):
        X = self._validate_predict(X)
        votes = np.zeros((X.shape[0], self.n_classes_))
        rows = np.arange(X.shape[0])
        for tree in self.trees_:
            votes[rows, tree.predict(X).astype(np.int64)] += 1.0
        return votes / len(self.trees_)

    def _get_weights(self):
        return {"trees": [t.to_dict() for t in self.trees_], "degenerate": bool(self.degenerate_)}

    def _set_weights(self, state):
        self.trees_ = [Tree.from_dict(t) for t in state["trees"]]
        self.degenerate_ = bool(state.get("degenerate", False))


@register
class GBDTClassifier(TargetClassifier):
    """Softmax gradient boosting: each round fits one regression tree per class.

    Trees are fit to the residuals ``onehot - softmax(F)`` and their leaves
    hold the mean residual, scaled by ``shrinkage``. The initial score is the
    log class prior.
    """

    kind = "GBDT"

    def __init__(self, n_trees=100, max_depth=3, shrinkage=0.1, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.shrinkage = shrinkage
        self.random_state = random_state

    def fit(self, X, y, n_classes=None):
        X, y = self._validate_fit(X, y, n_classes)
        c = self.n_classes_
        self.degenerate_ = np.unique(y).size == 1
        if self.degenerate_:
            warnings.warn("single-class training data; boosting is a constant predictor",
                          DegenerateTrainingWarning, stacklevel=2)
        onehot = np.eye(c)[y]
        prior = np.clip(onehot.mean(axis=0), 1e-12, None)
        self.init_score_ = np.log(prior)
        F = np.tile(self.init_score_, (X.shape[0], 1))
        self.trees_ = []
        self.loss_curve_ = [_log_loss(F, y)]
        for _ in range(self.n_trees):
            resid = onehot - _softmax(F)
            round_trees = []
            for k in range(c):
                r = resid[:, k]

                def leaf_mean(rows, r=r):
                    return self.shrinkage * float(r[rows].mean())

                tree = build_tree(X, r[:, None], leaf_mean, criterion="mse",
                                  max_depth=self.max_depth)
                F[:, k] += tree.predict(X)
                round_trees.append(tree)
            self.trees_.append(round_trees)
            self.loss_curve_.append(_log_loss(F, y))
        self.train_meta_ = {"seed": self.random_state, "degenerate": bool(self.degenerate_)}
        return self

    def decision_function(self, X):
        X = self._validate_predict(X)
        F = np.tile(self.init_score_, (X.shape[0], 1))
        for round_trees in self.trees_:
            for k, tree in enumerate(round_trees):
                F[:, k] += tree.predict(X)
        return F

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def _get_weights(self):
        return {"init_score": self.init_score_,
                "trees": [[t.to_dict() for t in rt] for rt in self.trees_],
                "degenerate": bool(self.degenerate_)}

    def _set_weights(self, state):
        self.init_score_ = np.asarray(state["init_score"], dtype=np.float64)
        self.trees_ = [[Tree.from_dict(t) for t in rt] for rt in state["trees"]]
        self.degenerate_ = bool(state.get("degenerate", False))


def _softmax(F):
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_loss(F, y):
    z = F - F.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(y.size), y].mean())
