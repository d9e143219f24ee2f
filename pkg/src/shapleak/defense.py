"""Release-time countermeasures: grid quantization and top-k variance release."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shapleak.explain import Explanation


@dataclass(frozen=True)
class DefenseConfig:
    """Explanation-side defenses applied by the service before release.

    ``quantize_range`` is ``(lo, hi)`` with scalars or per-feature arrays;
    ``None`` means calibrate it per feature at service start. ``topk_indices``
    likewise defaults to a variance ranking over the calibration batch.
    """

    quantize_levels: int | None = None
    quantize_range: tuple | None = None
    topk: int | None = None
    topk_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.quantize_levels is not None and self.quantize_levels < 2:
            raise ValueError("quantize_levels must be >= 2")
        if self.topk is not None and self.topk < 0:
            raise ValueError("topk must be >= 0")
        if self.topk_indices is not None and self.topk is not None \
                and len(self.topk_indices) != self.topk:
            raise ValueError("topk_indices must contain exactly topk entries")

    @property
    def active(self) -> bool:
        return self.quantize_levels is not None or self.topk is not None

    def to_dict(self) -> dict:
        rng = None
        if self.quantize_range is not None:
            rng = [np.asarray(v).tolist() for v in self.quantize_range]
        return {"quantize_levels": self.quantize_levels, "quantize_range": rng,
                "topk": self.topk,
                "topk_indices": None if self.topk_indices is None else list(self.topk_indices)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "DefenseConfig":
        d = d or {}
        rng = d.get("quantize_range")
        idx = d.get("topk_indices")
        return cls(d.get("quantize_levels"), None if rng is None else tuple(rng),
                   d.get("topk"), None if idx is None else tuple(int(i) for i in idx))


def quantize_values(S, levels: int, lo, hi) -> np.ndarray:
    """Snap to the nearest of ``levels`` evenly spaced points on ``[lo, hi]``; ties go down.

    ``lo``/``hi`` broadcast against the last axis, so per-feature grids are
    allowed. NaN (withheld) entries pass through.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(~(lo < hi)):
        raise ValueError("quantization range needs lo < hi")
    S = np.asarray(S, dtype=np.float64)
    step = (hi - lo) / (levels - 1)
    idx = np.clip(np.ceil((S - lo) / step - 0.5), 0, levels - 1)
    return np.where(np.isnan(S), np.nan, lo + idx * step)


def quantize(e: Explanation, levels: int, value_range) -> Explanation:
    lo, hi = value_range
    return e.replace(shapley=quantize_values(e.shapley, levels, lo, hi))


def calibrated_range(S, pad: float = 1e-9):
    """Per-feature ``(min, max)`` of a calibration matrix, widened where degenerate."""
    S = np.asarray(S, dtype=np.float64)
    lo, hi = np.nanmin(S, axis=0), np.nanmax(S, axis=0)
    flat = ~(hi > lo)
    return np.where(flat, lo - pad, lo), np.where(flat, hi + pad, hi)


def rank_by_shapley_variance(explanations) -> np.ndarray:
    """Feature indices by descending variance across explanations; ties keep the lower index."""
    if isinstance(explanations, np.ndarray):
        S = np.asarray(explanations, dtype=np.float64)
    else:
        S = np.vstack([getattr(e, "shapley", e) for e in explanations])
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("need at least 2 explanations to rank by variance")
    var = np.nanvar(S, axis=0)
    return np.argsort(-var, kind="stable")


def apply_topk(e: Explanation, indices) -> Explanation:
    """Withhold every entry not in ``indices`` (values are never altered)."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= e.n_features):
        raise ValueError("top-k index out of range")
    present = np.zeros(e.n_features, dtype=bool)
    present[idx] = True
    present &= e.released
    return e.replace(shapley=np.where(present, e.shapley, np.nan), present=present)


def apply_defense(e: Explanation, cfg: DefenseConfig) -> Explanation:
    """Quantize, then withhold, using the resolved (calibrated) settings in ``cfg``."""
    if cfg.quantize_levels is not None:
        if cfg.quantize_range is None:
            raise ValueError("quantization range not resolved; calibrate first")
        e = quantize(e, cfg.quantize_levels, cfg.quantize_range)
    if cfg.topk is not None:
        if cfg.topk_indices is None:
            raise ValueError("top-k indices not resolved; calibrate first")
        e = apply_topk(e, cfg.topk_indices)
    return e
