"""Experiment orchestration: sweeps over targets, query counts, sampling error and defenses."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from shapleak.attack1 import InverseMappingAttack, PartialPairsWarning, build_pairs
from shapleak.attack2 import InterpolationAttack, gen_random_queries, success_rate
from shapleak.data import Dataset, SynthConfig, gen_synthetic, load_csv, normalize_minmax, split
from shapleak.defense import DefenseConfig
from shapleak.explain import permutations_needed
from shapleak.harness.metrics import l1_loss, macc_vector, per_feature_l1, rg_e, rg_n, rg_u
from shapleak.models import train_model
from shapleak.service import ExplanationService, LocalClient, ServiceConfig

log = logging.getLogger(__name__)

ATTACKS = ("attack1", "attack2")


class ExperimentConfigError(ValueError):
    pass


def parse_sampling_error(value) -> tuple[str, str, float | None]:
    """``"r/5"``, ``0.2`` (fraction of r) or ``0`` (exact) -> ``(label, method, fraction)``."""
    if isinstance(value, str) and value.strip().startswith("r/"):
        frac = 1.0 / float(value.strip()[2:])
    else:
        frac = float(value)
    if frac < 0:
        raise ExperimentConfigError(f"sampling error must be >= 0, got {value!r}")
    if frac == 0:
        return "exact", "exact", None
    label = f"r/{1 / frac:g}"
    return label, "sampled", frac


@dataclass
class ExperimentConfig:
    """One run of the harness. Every list field is a sweep axis.

    ``sampling_errors`` entries are fractions of the Shapley range (or
    strings like ``"r/10"``; ``0`` means exact explanations). When the list
    is empty the ``method``/``nu`` pair is used directly.
    """

    name: str = "experiment"
    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    model_kinds: list = field(default_factory=lambda: ["MLP"])
    model_params: dict = field(default_factory=dict)
    method: str = "sampled"
    nu: int = 50
    sampling_errors: list = field(default_factory=list)
    delta: float = 0.1
    target_class: int | None = 0
    attacks: list = field(default_factory=lambda: list(ATTACKS))
    attack1: dict = field(default_factory=dict)
    attack2: dict = field(default_factory=dict)
    queries: list = field(default_factory=lambda: [800])
    quantize_levels: list = field(default_factory=lambda: [None])
    dropout: list = field(default_factory=lambda: [0.0])
    topk: list = field(default_factory=lambda: [None])
    topk_mode: str = "fill"
    n_references: int = 10
    val_size: int = 200
    budget: int = 100_000
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_references < 1:
            raise ExperimentConfigError("n_references must be >= 1")
        if self.val_size < 1:
            raise ExperimentConfigError("val_size must be >= 1")
        if not self.queries or any(int(q) < 1 for q in self.queries):
            raise ExperimentConfigError("queries must be a non-empty list of positive counts")
        if max(self.queries) > self.budget or self.val_size > self.budget:
            raise ExperimentConfigError(
                f"query counts ({max(self.queries)}) exceed the service budget ({self.budget})")
        bad = set(self.attacks) - set(ATTACKS)
        if bad:
            raise ExperimentConfigError(f"unknown attacks {sorted(bad)}")
        if self.method not in ("exact", "sampled"):
            raise ExperimentConfigError("method must be 'exact' or 'sampled'")
        if self.topk_mode not in ("fill", "subset"):
            raise ExperimentConfigError("topk_mode must be 'fill' or 'subset'")
        if not self.seeds:
            raise ExperimentConfigError("seeds must be non-empty")
        if not ({"synthetic", "csv"} & set(self.dataset)):
            raise ExperimentConfigError("dataset needs a 'synthetic' or 'csv' entry")
        for s in self.sampling_errors:
            parse_sampling_error(s)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ExperimentConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ExperimentConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ExperimentConfigError(f"cannot read config {path}: {exc}") from exc
        if d is not None and not isinstance(d, dict):
            raise ExperimentConfigError(f"{path}: config must be a mapping")
        d = dict(d or {})
        # a top-level "experiment" section keeps single-file configs tidy
        d = d.get("experiment", d)
        csv_path = d.get("dataset", {}).get("csv") if isinstance(d.get("dataset"), dict) else None
        if csv_path and not Path(csv_path).is_absolute():
            d["dataset"] = {**d["dataset"], "csv": str(Path(path).parent / csv_path)}
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


COLUMNS = (
    "experiment_id", "setting", "model_kind", "queries", "sampling", "nu", "quantize_levels",
    "dropout", "topk", "attack", "seed", "l1", "sr", "rg_e", "rg_u", "rg_n",
    "per_feature_l1", "per_feature_macc", "n_references", "wall_time", "error",
)


@dataclass
class ResultRow:
    experiment_id: str
    setting: str
    model_kind: str
    queries: int
    sampling: str
    nu: int | None
    quantize_levels: int | None
    dropout: float | None
    topk: int | None
    attack: str
    seed: int
    l1: float = math.nan
    sr: float = math.nan
    rg_e: float = math.nan
    rg_u: float = math.nan
    rg_n: float = math.nan
    per_feature_l1: list = field(default_factory=list)
    per_feature_macc: list = field(default_factory=list)
    n_references: int = 0
    wall_time: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def select(self, **where) -> "ResultTable":
        return ResultTable([r for r in self.rows
                            if all(getattr(r, k) == v for k, v in where.items())])

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def mean(self, name, **where) -> float:
        vals = self.select(**where).column(name)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else math.nan


@dataclass(frozen=True)
class Setting:
    model_kind: str
    dropout: float | None
    sampling: str
    method: str
    nu: int | None
    quantize_levels: int | None
    topk: int | None
    queries: int

    @property
    def label(self) -> str:
        parts = [self.model_kind, f"q={self.queries}", self.sampling]
        if self.dropout:
            parts.append(f"dropout={self.dropout:g}")
        if self.quantize_levels:
            parts.append(f"quant={self.quantize_levels}")
        if self.topk is not None:
            parts.append(f"topk={self.topk}")
        return " ".join(parts)


def expand_settings(cfg: ExperimentConfig) -> list[Setting]:
    if cfg.sampling_errors:
        sampling = []
        for s in cfg.sampling_errors:
            label, method, frac = parse_sampling_error(s)
            nu = None if frac is None else permutations_needed(cfg.delta, frac, 1.0)
            sampling.append((label, method, nu))
    elif cfg.method == "exact":
        sampling = [("exact", "exact", None)]
    else:
        sampling = [(f"nu={cfg.nu}", "sampled", int(cfg.nu))]

    out, seen = [], set()
    for kind, drop, (label, method, nu), ql, k, q in itertools.product(
            cfg.model_kinds, cfg.dropout, sampling, cfg.quantize_levels, cfg.topk, cfg.queries):
        kind = str(kind).upper()
        drop = float(drop) if kind == "MLP" and drop is not None else None
        s = Setting(kind, drop, label, method, nu, ql, k, int(q))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def load_experiment_dataset(source: dict) -> Dataset:
    if "csv" in source:
        return normalize_minmax(load_csv(source["csv"], source.get("label_column", "label")))[0]
    return gen_synthetic(SynthConfig(**(source.get("synthetic") or {})))


class _Runner:
    """Caches datasets, trained targets and services shared across rows."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.data = load_experiment_dataset(cfg.dataset)
        self._splits = {}
        self._models = {}
        self._services = {}

    def split(self, seed):
        if seed not in self._splits:
            sp = split(self.data, seed)
            rng = np.random.default_rng([seed, 1])
            val_rows = rng.choice(sp.val.n_samples, min(self.cfg.val_size, sp.val.n_samples),
                                  replace=False)
            ref_rows = rng.choice(sp.train.n_samples, self.cfg.n_references,
                                  replace=sp.train.n_samples < self.cfg.n_references)
            aux_order = rng.permutation(sp.aux.n_samples)
            self._splits[seed] = (sp, sp.val.features[np.sort(val_rows)],
                                  sp.train.features[ref_rows], sp.aux.features[aux_order])
        return self._splits[seed]

    def model(self, kind, dropout, seed):
        key = (kind, dropout, seed)
        if key not in self._models:
            params = dict(self.cfg.model_params.get(kind, self.cfg.model_params.get(kind.lower(), {})))
            if kind == "MLP" and dropout is not None:
                params["dropout_rate"] = dropout
            sp = self.split(seed)[0]
            self._models[key] = train_model(kind, sp.train, seed=seed, **params)
        return self._models[key]

    def service(self, s: Setting, seed, ref_index):
        key = (s.model_kind, s.dropout, s.method, s.nu, s.quantize_levels, s.topk, seed, ref_index)
        if key not in self._services:
            sp, X_val, refs, _ = self.split(seed)
            model = self.model(s.model_kind, s.dropout, seed)
            budgets = {"targets": len(X_val)}
            for att, q in itertools.product(ATTACKS, self.cfg.queries):
                budgets[f"{att}-{q}"] = self.cfg.budget
            scfg = ServiceConfig(
                None, tuple(refs[ref_index]), reference_source=None, method=s.method,
                nu=s.nu or 1, seed=seed * 1000 + ref_index, target_class=self.cfg.target_class,
                defense=DefenseConfig(quantize_levels=s.quantize_levels, topk=s.topk),
                budgets=budgets)
            svc = ExplanationService(model, scfg)
            targets = LocalClient(svc, "targets", id_prefix="target").batch_explain(X_val)
            self._services[key] = (svc, targets)
        return self._services[key]


def _attack1(runner, s, seed, svc, targets, X_val, X_aux):
    cfg = runner.cfg
    X_aux = X_aux[:s.queries]
    client = LocalClient(svc, f"attack1-{s.queries}", id_prefix=f"aux-{s.queries}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartialPairsWarning)
        S, X = build_pairs(X_aux, client)
    S_t = np.vstack([e.filled(0.0) for e in targets])
    params = {"random_state": seed, **cfg.attack1}
    X_hat = np.full_like(X_val, np.nan)
    if s.topk is not None and cfg.topk_mode == "subset":
        idx = np.asarray(svc.defense.topk_indices, dtype=np.int64)
        if idx.size:
            psi = InverseMappingAttack(**params).fit(S[:, idx], X[:, idx])
            X_hat[:, idx] = psi.predict(S_t[:, idx])
    else:
        psi = InverseMappingAttack(**params).fit(S, X)
        X_hat = psi.predict(S_t)
    return X_hat, X_aux


def _attack2(runner, s, seed, svc, targets, X_val):
    cfg = runner.cfg
    n = X_val.shape[1]
    X_rand = gen_random_queries(n, s.queries, seed)
    client = LocalClient(svc, f"attack2-{s.queries}", id_prefix=f"rand-{s.queries}")
    S_rand = np.vstack([e.shapley for e in client.batch_explain(X_rand)])
    S_t = np.vstack([e.shapley for e in targets])
    att = InterpolationAttack(**{"m_c": min(30, s.queries), **cfg.attack2}).fit(X_rand, S_rand)
    return att.predict(S_t)


def run_row(runner: _Runner, s: Setting, attack: str, seed: int, experiment_id: str) -> ResultRow:
    cfg = runner.cfg
    row = ResultRow(experiment_id, s.label, s.model_kind, s.queries, s.sampling, s.nu,
                    s.quantize_levels, s.dropout, s.topk, attack, int(seed))
    t0 = time.perf_counter()
    try:
        sp, X_val, refs, X_aux_all = runner.split(seed)
        if attack == "attack1" and s.queries > len(X_aux_all):
            raise ValueError(f"asked for {s.queries} auxiliary rows, only {len(X_aux_all)} exist")
        model = runner.model(s.model_kind, s.dropout, seed)
        n = X_val.shape[1]
        row.per_feature_macc = macc_vector(X_val, model.predict_proba(X_val)).tolist()
        l1s, srs, pf = [], [], []
        base_pool = X_aux_all[:s.queries] if attack == "attack1" else X_aux_all
        for j in range(cfg.n_references):
            svc, targets = runner.service(s, seed, j)
            if attack == "attack1":
                X_hat, _ = _attack1(runner, s, seed, svc, targets, X_val, X_aux_all)
            else:
                X_hat = _attack2(runner, s, seed, svc, targets, X_val)
            srs.append(success_rate(X_hat))
            if np.isnan(X_hat).all():
                l1s.append(math.nan)
            else:
                l1s.append(l1_loss(X_hat, X_val))
            pf.append(per_feature_l1(X_hat, X_val))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            row.l1 = float(np.nanmean(l1s)) if np.isfinite(l1s).any() else math.nan
            row.per_feature_l1 = np.nanmean(np.vstack(pf), axis=0).tolist()
        row.sr = float(np.mean(srs))
        m = len(X_val)
        row.rg_e = l1_loss(rg_e(base_pool, m, seed), X_val)
        row.rg_u = l1_loss(rg_u(n, m, seed), X_val)
        row.rg_n = l1_loss(rg_n(n, m, seed), X_val)
        row.n_references = cfg.n_references
    except Exception as exc:  # noqa: BLE001 - a failed row is recorded, the run continues
        log.exception("row %s/%s/seed=%s failed", s.label, attack, seed)
        row.error = f"{type(exc).__name__}: {exc}"
    row.wall_time = time.perf_counter() - t0
    return row


def run_experiment(cfg: ExperimentConfig, progress=None) -> ResultTable:
    """Run every (setting, seed, attack) combination and collect one row each."""
    cfg.validate()
    runner = _Runner(cfg)
    table = ResultTable()
    for si, s in enumerate(expand_settings(cfg)):
        for seed in cfg.seeds:
            for attack in cfg.attacks:
                row = run_row(runner, s, attack, int(seed), f"{cfg.name}-{si}")
                table.rows.append(row)
                if progress is not None:
                    progress(row)
    return table


def _encode(v):
    if isinstance(v, list):
        return json.dumps([None if isinstance(x, float) and math.isnan(x) else x for x in v])
    if v is None:
        return ""
    return v


def emit_csv(table: ResultTable, path) -> None:
    """Write rows in ``COLUMNS`` order; vectors are JSON lists, missing values empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in table.rows:
            w.writerow([_encode(getattr(r, c)) for c in COLUMNS])


_INT_COLS = {"queries", "nu", "quantize_levels", "topk", "seed", "n_references"}
_FLOAT_COLS = {"dropout", "l1", "sr", "rg_e", "rg_u", "rg_n", "wall_time"}
_LIST_COLS = {"per_feature_l1", "per_feature_macc"}


def read_csv(path) -> ResultTable:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            vals = {}
            for c in COLUMNS:
                v = rec[c]
                if c in _LIST_COLS:
                    vals[c] = [math.nan if x is None else x for x in json.loads(v)] if v else []
                elif c in _INT_COLS:
                    vals[c] = int(v) if v != "" else None
                elif c in _FLOAT_COLS:
                    vals[c] = float(v) if v != "" else (None if c == "dropout" else math.nan)
                else:
                    vals[c] = v
            rows.append(ResultRow(**vals))
    return ResultTable(rows)


def emit_plotdata(table: ResultTable, path, x="queries", y="l1") -> None:
    """Seed-averaged ``(x, y, series)`` triples; the series names the remaining setting."""
    groups: dict[tuple, list] = {}
    for r in table.rows:
        if not r.ok:
            continue
        series = " ".join(p for p in [r.attack, r.model_kind, r.sampling,
                                      f"quant={r.quantize_levels}" if r.quantize_levels else "",
                                      f"dropout={r.dropout:g}" if r.dropout else "",
                                      f"topk={r.topk}" if r.topk is not None else "",
                                      "" if x == "queries" else f"q={r.queries}"] if p)
        groups.setdefault((getattr(r, x), series), []).append(getattr(r, y))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("x", "y", "series"))
        for (xv, series), ys in sorted(groups.items(), key=lambda kv: (kv[0][1], str(kv[0][0]))):
            ys = np.asarray(ys, dtype=np.float64)
            ys = ys[np.isfinite(ys)]
            w.writerow((_encode(xv), float(ys.mean()) if ys.size else "", series))


def summarize(table: ResultTable) -> list[dict]:
    """Seed-wise mean and spread of l1/SR per (setting, attack)."""
    groups: dict[tuple, list] = {}
    for r in table.rows:
        groups.setdefault((r.setting, r.attack), []).append(r)
    out = []
    for (setting, attack), rows in groups.items():
        def stat(name):
            v = np.array([getattr(r, name) for r in rows], dtype=np.float64)
            v = v[np.isfinite(v)]
            return (float(v.mean()), float(v.std())) if v.size else (math.nan, math.nan)
        out.append({"setting": setting, "attack": attack, "seeds": len(rows),
                    "errors": sum(not r.ok for r in rows),
                    "l1": stat("l1"), "sr": stat("sr"), "rg_e": stat("rg_e"),
                    "rg_u": stat("rg_u"), "rg_n": stat("rg_n")})
    return out
