"""Background-free reconstruction from random queries.

The adversary explains uniformly random inputs, then recovers each private
feature independently: the random rows whose Shapley value for that feature
is closest to the target's value vote for the feature value by their mean,
unless their values spread wider than ``tau``, in which case the attack
abstains for that cell (stored as NaN).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

XI_FLOOR = 1e-6


def gen_random_queries(n: int, m: int, seed=0) -> np.ndarray:
    """``m`` i.i.d. uniform samples on ``[0, 1]^n``."""
    if m < 1 or n < 1:
        raise ValueError("need m >= 1 and n >= 1")
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(m, n))


def shap_range(S, per_feature: bool = False):
    """Tight range ``max S - min S`` over all released values (per column if asked)."""
    S = np.asarray(S, dtype=np.float64)
    if S.size == 0:
        raise ValueError("empty explanation set")
    if S.ndim == 1:
        S = S[None, :]
    if per_feature:
        return np.nanmax(S, axis=0) - np.nanmin(S, axis=0)
    return float(np.nanmax(S) - np.nanmin(S))


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Per-cell estimates (NaN = abstained) with candidate ranges and counts."""

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray

    @property
    def recovered(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def to_dict(self) -> dict:
        def enc(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {"values": enc(self.values), "lower": enc(self.lower),
                "upper": enc(self.upper), "counts": np.atleast_2d(self.counts).tolist()}


def run_attack2(s_target, X_rand, S_rand, m_c=30, tau=0.4, xi=None) -> Reconstruction:
    """Reconstruct one or many targets (rows of ``s_target``) feature by feature.

    Candidates for feature ``i`` are the random rows sorted by
    ``|s_target_i - S_rand[:, i]|`` (stable, so ties go to the lower row),
    admitted while fewer than ``m_c`` are held or the distance is below
    ``xi``. Because distances are sorted, that admits exactly
    ``max(m_c, #{dist < xi})`` leading rows.
    """
    X_rand = np.asarray(X_rand, dtype=np.float64)
    S_rand = np.asarray(S_rand, dtype=np.float64)
    s = np.asarray(s_target, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    m, n = X_rand.shape
    if S_rand.shape != (m, n):
        raise ValueError(f"S_rand shape {S_rand.shape} does not match X_rand {X_rand.shape}")
    if s.shape[1] != n:
        raise ValueError(f"target has {s.shape[1]} features, random set has {n}")
    if m < m_c:
        raise ValueError(f"need at least m_c={m_c} random queries, got {m}")
    if xi is None:
        xi = default_xi(S_rand)
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n,))

    T = s.shape[0]
    values = np.full((T, n), np.nan)
    lower = np.full((T, n), np.nan)
    upper = np.full((T, n), np.nan)
    counts = np.zeros((T, n), dtype=np.int64)
    rank = np.arange(m)
    for i in range(n):
        col_ok = ~np.isnan(S_rand[:, i])
        if col_ok.sum() < m_c:
            continue
        Si, Xi = S_rand[col_ok, i], X_rand[col_ok, i]
        rows = ~np.isnan(s[:, i])
        if not rows.any():
            continue
        dist = np.abs(s[rows, i][:, None] - Si[None, :])
        order = np.argsort(dist, axis=1, kind="stable")
        k = np.maximum(m_c, np.sum(dist < xi[i], axis=1))
        admitted = rank[None, :Si.size] < k[:, None]
        cand = Xi[order]
        a = np.where(admitted, cand, np.inf).min(axis=1)
        b = np.where(admitted, cand, -np.inf).max(axis=1)
        mean = np.where(admitted, cand, 0.0).sum(axis=1) / k
        lower[rows, i], upper[rows, i], counts[rows, i] = a, b, k
        values[rows, i] = np.where(b - a > tau, np.nan, mean)
    if single:
        return Reconstruction(values[0], lower[0], upper[0], counts[0])
    return Reconstruction(values, lower, upper, counts)


def default_xi(S_rand, fraction=0.2, per_feature=False):
    r = shap_range(S_rand, per_feature=per_feature)
    return np.where(np.asarray(r) > 0, fraction * np.asarray(r), XI_FLOOR)


class InterpolationAttack(BaseEstimator):
    """Estimator wrapper: ``fit(X_rand, S_rand)``, ``predict(S) -> X_hat`` with NaN cells.

    ``xi=None`` sets the Shapley-distance threshold to ``xi_fraction`` times
    the tight range of ``S_rand`` (global, or per feature with
    ``per_feature_range=True``).
    """

    def __init__(self, m_c=30, tau=0.4, xi=None, xi_fraction=0.2, per_feature_range=False):
        self.m_c = m_c
        self.tau = tau
        self.xi = xi
        self.xi_fraction = xi_fraction
        self.per_feature_range = per_feature_range

    def fit(self, X_rand, S_rand):
        if self.m_c < 1:
            raise ValueError("m_c must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        X_rand = check_array(X_rand, dtype=np.float64)
        S_rand = check_array(S_rand, dtype=np.float64, ensure_all_finite="allow-nan")
        if X_rand.shape != S_rand.shape:
            raise ValueError("X_rand and S_rand must have the same shape")
        if X_rand.shape[0] < self.m_c:
            raise ValueError(f"need at least m_c={self.m_c} random queries, got {X_rand.shape[0]}")
        if self.xi is not None:
            if np.any(np.asarray(self.xi) <= 0):
                raise ValueError("xi must be positive")
            self.xi_ = np.broadcast_to(np.asarray(self.xi, dtype=np.float64),
                                       (X_rand.shape[1],)).copy()
        else:
            self.xi_ = np.broadcast_to(
                default_xi(S_rand, self.xi_fraction, self.per_feature_range),
                (X_rand.shape[1],)).copy()
        self.range_ = shap_range(S_rand, per_feature=self.per_feature_range)
        self.X_rand_, self.S_rand_ = X_rand, S_rand
        self.n_features_in_ = X_rand.shape[1]
        return self

    def reconstruct(self, S) -> Reconstruction:
        check_is_fitted(self)
        return run_attack2(S, self.X_rand_, self.S_rand_, self.m_c, self.tau, self.xi_)

    def predict(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=np.float64)
        return self.reconstruct(np.atleast_2d(S)).values


@dataclass(frozen=True)
class BoundReport:
    u: float
    w: float
    k: int
    a: float
    b: float
    error_radius: float
    confidence: float


def error_bound(u, w, k, a, b) -> BoundReport:
    """Chebyshev + Hoeffding bound on ``|x - x_hat|`` for a mean of ``k`` candidates in ``[a, b]``.

    The radius uses the worst-case spread ``sigma = (b - a) / 2``; the
    confidence is clipped to ``[0, 1]``.
    """
    if not u > 1:
        raise ValueError("u must be > 1")
    if not w > 0:
        raise ValueError("w must be > 0")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not b > a:
        raise ValueError("need b > a")
    width = b - a
    radius = u * width / 2.0 + w
    hoeffding = 2.0 * math.exp(math.log(u * u - 1.0) - 2.0 * w * w * k / width ** 2) / (u * u)
    confidence = min(1.0, max(0.0, 1.0 - 1.0 / (u * u) - hoeffding))
    return BoundReport(float(u), float(w), int(k), float(a), float(b), radius, confidence)


def success_rate(values) -> float:
    """Fraction of cells that were not abstained (NaN)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reconstruction set")
    return float(np.mean(~np.isnan(v)))
