"""Reconstruction metrics and random-guess baselines."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import stats

from shapleak.data import macc


def l1_loss(X_hat, X, mask=None) -> float:
    """Mean absolute error over the cells selected by ``mask`` (default: non-NaN estimates)."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X_hat.shape != X.shape:
        raise ValueError(f"shape mismatch: {X_hat.shape} vs {X.shape}")
    mask = ~np.isnan(X_hat) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask: no cells to score")
    return float(np.mean(np.abs(X_hat[mask] - X[mask])))


def per_feature_l1(X_hat, X) -> np.ndarray:
    """Column-wise mean absolute error over non-NaN estimates (NaN for empty columns)."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    err = np.abs(X_hat - np.asarray(X, dtype=np.float64))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(err, axis=0)


def rg_e(X_aux, m: int, seed=0) -> np.ndarray:
    """Guess each row by drawing a whole row of ``X_aux`` uniformly with replacement."""
    X_aux = np.asarray(getattr(X_aux, "features", X_aux), dtype=np.float64)
    if X_aux.ndim != 2 or X_aux.shape[0] == 0:
        raise ValueError("auxiliary set is empty")
    idx = np.random.default_rng(seed).integers(0, X_aux.shape[0], size=m)
    return X_aux[idx]


def rg_u(n: int, m: int, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(m, n))


def rg_n(n: int, m: int, seed=0) -> np.ndarray:
    """Draws from N(0.5, 0.25^2), clipped to [0, 1]."""
    return np.clip(np.random.default_rng(seed).normal(0.5, 0.25, size=(m, n)), 0.0, 1.0)


def macc_vector(X, P) -> np.ndarray:
    """MACC of every feature column of ``X`` against the output matrix ``P``."""
    X = np.asarray(X, dtype=np.float64)
    return np.array([macc(X[:, i], P) for i in range(X.shape[1])])


def spearman(a, b) -> float:
    """Rank correlation over the positions where both inputs are finite."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3:
        return float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(stats.spearmanr(a[ok], b[ok]).statistic)
