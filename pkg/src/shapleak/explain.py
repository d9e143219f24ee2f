"""Exact and permutation-sampled Shapley explanations, plus leakage diagnostics.

A *value function* here is the target-class probability of a black-box
model evaluated on composed samples: features in a coalition ``S`` take
their values from the query ``x``, the rest from a reference ``x0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

MAX_EXACT_FEATURES = 20
_CHUNK_ROWS = 1 << 16


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceSample:
    values: np.ndarray
    source: int | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ExplainError("reference must be a single sample")
        if np.any(v < 0) or np.any(v > 1):
            raise ExplainError("reference values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def id(self) -> str:
        return f"train:{self.source}" if self.source is not None else "custom"


@dataclass(frozen=True, eq=False)
class Explanation:
    """Shapley vector of one query for one target class.

    ``present`` marks released entries (``None``: all of them). Withheld
    entries hold NaN in ``shapley``.
    """

    shapley: np.ndarray
    target_class: int
    method: str = "exact"
    nu: int | None = None
    reference_id: str = "custom"
    seed: int | None = None
    present: np.ndarray | None = field(default=None)

    def __post_init__(self):
        s = np.array(self.shapley, dtype=np.float64)
        if s.ndim != 1:
            raise ExplainError("shapley must be a vector")
        object.__setattr__(self, "shapley", s)
        if self.present is not None:
            mask = np.array(self.present, dtype=bool)
            if mask.shape != s.shape:
                raise ExplainError("present mask must match the shapley vector")
            object.__setattr__(self, "present", mask)
        if self.method not in ("exact", "sampled"):
            raise ExplainError(f"unknown method {self.method!r}")

    @property
    def n_features(self) -> int:
        return self.shapley.size

    @property
    def released(self) -> np.ndarray:
        if self.present is None:
            return np.ones(self.shapley.size, dtype=bool)
        return self.present

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Dense vector with withheld entries replaced by ``fill``."""
        return np.where(self.released, self.shapley, fill)

    def replace(self, **changes) -> "Explanation":
        fields = dict(shapley=self.shapley, target_class=self.target_class,
                      method=self.method, nu=self.nu, reference_id=self.reference_id,
                      seed=self.seed, present=self.present)
        fields.update(changes)
        return Explanation(**fields)

    def to_dict(self) -> dict:
        return {
            "shapley": [float(v) if ok else None for v, ok in zip(self.shapley, self.released)],
            "target_class": int(self.target_class),
            "method": {"type": self.method, "nu": self.nu},
            "reference_id": self.reference_id,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        raw = d["shapley"]
        present = np.array([v is not None for v in raw])
        values = np.array([np.nan if v is None else v for v in raw], dtype=np.float64)
        return cls(values, int(d["target_class"]), d["method"]["type"], d["method"].get("nu"),
                   d.get("reference_id", "custom"), d.get("seed"),
                   None if present.all() else present)


def compose_masked(x, x0, S) -> np.ndarray:
    """Sample taking ``x[j]`` for ``j`` in ``S`` (0-based) and ``x0[j]`` elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ExplainError("x and reference differ in length")
    idx = np.fromiter(S, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise ExplainError(f"feature index out of range for n={x.size}")
    out = x0.copy()
    out[idx] = x[idx]
    return out


def _as_value_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    if callable(model):
        return model
    raise ExplainError("model must expose predict_proba or be callable")


def _evaluate(f, Z):
    if Z.shape[0] <= _CHUNK_ROWS:
        return np.asarray(f(Z), dtype=np.float64)
    return np.vstack([np.asarray(f(Z[i:i + _CHUNK_ROWS]), dtype=np.float64)
                      for i in range(0, Z.shape[0], _CHUNK_ROWS)])


def _prepare(model, x, x0, target_class):
    f = _as_value_fn(model)
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(getattr(x0, "values", x0), dtype=np.float64)
    if x.ndim != 1 or x.shape != x0.shape:
        raise ExplainError(f"x and reference must be vectors of equal length, got {x.shape}, {x0.shape}")
    if target_class is None:
        target_class = int(np.argmax(_evaluate(f, x[None, :])[0]))
    return f, x, x0, int(target_class)


def _ref_id(x0):
    return x0.id if isinstance(x0, ReferenceSample) else "custom"


def exact_shapley_values(f, x, x0, target_class) -> np.ndarray:
    """Enumerate all ``2^n`` coalitions; coalition bit ``j`` selects ``x[j]``."""
    n = x.size
    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    v = np.empty(masks.size)
    for lo in range(0, masks.size, _CHUNK_ROWS):
        b = bits[lo:lo + _CHUNK_ROWS]
        v[lo:lo + b.shape[0]] = _evaluate(f, np.where(b, x, x0))[:, target_class]
    size = bits.sum(axis=1)
    # weight of a coalition of size k not containing i: k! (n-k-1)! / n!
    w = np.array([1.0 / (n * math.comb(n - 1, k)) for k in range(n)])
    s = np.empty(n)
    for i in range(n):
        without = masks[~bits[:, i]]
        s[i] = np.sum(w[size[without]] * (v[without | (1 << i)] - v[without]))
    return s


def exact_shapley(model, x, x0, target_class=None) -> Explanation:
    """Exact Shapley values by full coalition enumeration (``n <= 20``)."""
    f, x, x0v, c = _prepare(model, x, x0, target_class)
    if x.size > MAX_EXACT_FEATURES:
        raise ExplainError(
            f"exact enumeration refused for n={x.size} > {MAX_EXACT_FEATURES}; use sampled_shapley"
        )
    return Explanation(exact_shapley_values(f, x, x0v, c), c, "exact", None, _ref_id(x0))


def permutations_needed(delta: float, epsilon: float, r_m: float = 1.0) -> int:
    """Permutation count ``ceil(ln(2/delta) r_m^2 / (2 epsilon^2))`` for the Hoeffding guarantee."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if epsilon <= 0 or r_m <= 0:
        raise ValueError("epsilon and r_m must be positive")
    ratio = r_m / epsilon
    # ratio**2 is computed from the ratio so that epsilon = r_m / 5 gives exactly 25
    return math.ceil(math.log(2.0 / delta) * ratio * ratio / 2.0)


def sampled_shapley_values(f, x, x0, target_class, nu, rng) -> np.ndarray:
    """Mean marginal contribution over ``nu`` uniformly random feature orderings."""
    n = x.size
    perms = rng.permuted(np.tile(np.arange(n), (nu, 1)), axis=1)
    position = np.argsort(perms, axis=1)
    steps = np.arange(n + 1)
    # Z[k, t] holds x on the first t features of ordering k and x0 elsewhere
    Z = np.where(position[:, None, :] < steps[None, :, None], x, x0)
    v = _evaluate(f, Z.reshape(-1, n))[:, target_class].reshape(nu, n + 1)
    contrib = np.empty((nu, n))
    np.put_along_axis(contrib, perms, v[:, 1:] - v[:, :-1], axis=1)
    return contrib.mean(axis=0)


def sampled_shapley(model, x, x0, target_class=None, nu=50, seed=0) -> Explanation:
    if nu < 1:
        raise ExplainError("nu must be >= 1")
    f, x, x0v, c = _prepare(model, x, x0, target_class)
    s = sampled_shapley_values(f, x, x0v, c, int(nu), np.random.default_rng(seed))
    return Explanation(s, c, "sampled", int(nu), _ref_id(x0), seed)


def estimate_noise_var(model, x, x0, target_class=None, nu=50, trials=30, seed=0) -> np.ndarray:
    """Per-feature unbiased variance of sampled Shapley values over repeated runs.

    ``nu=None`` replays the exact engine, whose variance is zero.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials for a variance estimate")
    f, x, x0v, c = _prepare(model, x, x0, target_class)
    runs = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        if nu is None:
            runs.append(exact_shapley_values(f, x, x0v, c))
        else:
            runs.append(sampled_shapley_values(f, x, x0v, c, int(nu), np.random.default_rng(child)))
    return np.var(np.array(runs), axis=0, ddof=1)


class MutualInformation(NamedTuple):
    bits: float
    noise_dominated: bool


def mi_gaussian(var_s: float, var_eps: float) -> MutualInformation:
    """Gaussian-channel information ``0.5 log2(var_s / var_eps)`` carried by a Shapley value."""
    if var_eps <= 0:
        raise ValueError("noise variance must be positive")
    if var_s < var_eps:
        return MutualInformation(0.0, True)
    return MutualInformation(0.5 * math.log2(var_s / var_eps), False)


class GoodnessOfFit(NamedTuple):
    statistic: float
    pvalue: float


def gaussian_fit_test(values, n_bins: int = 10) -> GoodnessOfFit:
    """Chi-square test of normality with ``n_bins`` equiprobable bins.

    The mean and variance are estimated from ``values``, so the reference
    distribution has ``n_bins - 3`` degrees of freedom.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if n_bins < 4:
        raise ValueError("n_bins must be >= 4 (two fitted parameters)")
    if v.size < 5 * n_bins:
        raise ValueError(f"need at least {5 * n_bins} values for {n_bins} bins, got {v.size}")
    mu, sd = v.mean(), v.std(ddof=1)
    if sd == 0:
        return GoodnessOfFit(math.inf, 0.0)
    inner = stats.norm.ppf(np.arange(1, n_bins) / n_bins, loc=mu, scale=sd)
    observed = np.bincount(np.searchsorted(inner, v, side="right"), minlength=n_bins)
    expected = v.size / n_bins
    chi2 = float(np.sum((observed - expected) ** 2) / expected)
    return GoodnessOfFit(chi2, float(stats.chi2.sf(chi2, n_bins - 3)))


class ShapleyExplainer(TransformerMixin, BaseEstimator):
    """Transformer from samples to Shapley vectors of a fitted black-box model.

    ``fit(model, reference)`` binds the model and the reference sample;
    ``transform(X)`` returns an ``(m, n)`` matrix. With ``method="sampled"``
    row ``j`` is explained with seed ``random_state + j``.
    """

    def __init__(self, method="sampled", nu=50, target_class=None, random_state=0):
        self.method = method
        self.nu = nu
        self.target_class = target_class
        self.random_state = random_state

    def fit(self, model, reference):
        if self.method not in ("exact", "sampled"):
            raise ExplainError(f"unknown method {self.method!r}")
        self.model_ = model
        self.reference_ = (reference if isinstance(reference, ReferenceSample)
                           else ReferenceSample(reference))
        self.n_features_in_ = self.reference_.values.size
        return self

    def explain(self, x, seed=None, target_class=None) -> Explanation:
        check_is_fitted(self)
        tc = self.target_class if target_class is None else target_class
        if self.method == "exact":
            return exact_shapley(self.model_, x, self.reference_, tc)
        seed = self.random_state if seed is None else seed
        return sampled_shapley(self.model_, x, self.reference_, tc, self.nu, seed)

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return np.vstack([self.explain(x, seed=self.random_state + j).shapley
                          for j, x in enumerate(X)])
