"""Command-line entry point: ``shapleak <subcommand> [--config FILE] [flags]``.

Each subcommand reads its own section of the YAML config file (see
``configs/example.yaml`` in the repository); flags given on the command line
override the file. Exit codes: 0 success, 1 configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from shapleak.attack1 import InverseMappingAttack, build_pairs
from shapleak.attack2 import InterpolationAttack, error_bound, gen_random_queries, success_rate
from shapleak.data import (
    DataError,
    Dataset,
    SynthConfig,
    gen_synthetic,
    load_csv,
    load_dataset,
    normalize_minmax,
    save_csv,
    save_dataset,
    split,
)
from shapleak.defense import DefenseConfig, apply_defense, calibrated_range, rank_by_shapley_variance
from shapleak.explain import Explanation, ExplainError, ReferenceSample, exact_shapley, sampled_shapley
from shapleak.harness.experiment import (
    ExperimentConfig,
    ExperimentConfigError,
    emit_csv,
    emit_plotdata,
    read_csv,
    run_experiment,
    summarize,
)
from shapleak.harness.metrics import l1_loss, rg_e, rg_n, rg_u
from shapleak.models import load_model, save_model, train_model
from shapleak.models.base import ModelFormatError
from shapleak.service import ConfigError, ServiceClient, ServiceConfig, serve

log = logging.getLogger("shapleak")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
CONFIG_ERRORS = (ConfigError, ExperimentConfigError, DataError, ModelFormatError,
                 ExplainError, FileNotFoundError, yaml.YAMLError)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _kv(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, yaml.safe_load(value)


def _set_nested(d: dict, dotted: str, value):
    *path, last = dotted.split(".")
    for p in path:
        d = d.setdefault(p, {})
    d[last] = value


def _section(args, name: str) -> dict:
    """Config-file section merged with explicitly given flags (flags win)."""
    base = {}
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a mapping")
        base = dict(doc.get(name) or {})
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "verbose", "set") or value is None:
            continue
        if key == "param":
            base.setdefault("params", {}).update(dict(value))
        else:
            base[key] = value
    for dotted, value in getattr(args, "set", None) or []:
        _set_nested(base, dotted, value)
    return base


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def read_data(path, label_column="label") -> Dataset:
    if str(path).endswith(".csv"):
        return normalize_minmax(load_csv(path, label_column))[0]
    return load_dataset(path)


def _write_data(d: Dataset, path):
    if str(path).endswith(".csv"):
        save_csv(d, path)
    else:
        save_dataset(d, path)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _nan_to_none(a):
    return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]


def cmd_gen_synth(args):
    c = _section(args, "synthetic")
    _require(c, "out")
    out = c.pop("out")
    try:
        cfg = SynthConfig(**c)
    except TypeError as exc:
        raise UsageError(f"bad synthetic settings: {exc}") from exc
    d = gen_synthetic(cfg)
    _write_data(d, out)
    print(f"wrote {d.n_samples} rows x {d.n_features} features to {out}")


def cmd_train(args):
    c = _section(args, "train")
    _require(c, "data", "out")
    d = read_data(c["data"])
    seed = int(c.get("seed", 0))
    sp = split(d, seed)
    model = train_model(c.get("kind", "MLP"), sp.train, seed=seed, **(c.get("params") or {}))
    save_model(model, c["out"])
    acc = float(np.mean(model.predict(sp.val.features) == sp.val.labels))
    _emit({"kind": model.kind, "seed": seed, "train_rows": sp.train.n_samples,
           "val_accuracy": acc, "model": str(c["out"])})


def _reference(c, d: Dataset, seed: int) -> ReferenceSample:
    ref = c.get("reference")
    if isinstance(ref, list):
        return ReferenceSample(np.asarray(ref, dtype=np.float64))
    row = int(c.get("reference_row", 0) if ref is None else ref)
    train = split(d, seed).train
    if not 0 <= row < train.n_samples:
        raise UsageError(f"reference_row {row} out of range for {train.n_samples} training rows")
    return ReferenceSample(train.features[row], row)


def cmd_explain(args):
    c = _section(args, "explain")
    _require(c, "model", "data")
    model = load_model(c["model"])
    d = read_data(c["data"])
    seed = int(c.get("seed", 0))
    ref = _reference(c, d, int(c.get("split_seed", seed)))
    rows = c.get("rows") or list(range(min(int(c.get("n_rows", 10)), d.n_samples)))
    method, nu, tc = c.get("method", "sampled"), int(c.get("nu", 50)), c.get("target_class")
    lines = []
    for r in rows:
        x = d.features[int(r)]
        if method == "exact":
            e = exact_shapley(model, x, ref, tc)
        else:
            e = sampled_shapley(model, x, ref, tc, nu, seed + int(r))
        lines.append(json.dumps({"row": int(r), **e.to_dict()}))
    text = "\n".join(lines) + "\n"
    if c.get("out") not in (None, "-"):
        Path(c["out"]).write_text(text)
        print(f"wrote {len(lines)} explanations to {c['out']}")
    else:
        sys.stdout.write(text)


def _service_config(c: dict) -> ServiceConfig:
    c = dict(c)
    ref = c.get("reference")
    if isinstance(ref, dict) and "data" in ref:
        d = read_data(ref["data"])
        row = int(ref.get("row", 0))
        c["reference"] = {"values": split(d, int(ref.get("split_seed", 0))).train.features[row].tolist(),
                          "source": row}
    if "budget" in c:
        c["budgets"] = {**(c.get("budgets") or {}), **dict(c.pop("budget"))}
    if "model" in c:
        c["model_path"] = c.pop("model")
    return ServiceConfig.from_dict(c).with_env_overrides()


def cmd_serve(args):
    cfg = _service_config(_section(args, "service"))
    server = serve(cfg, background=False)
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def _attack_data(c):
    _require(c, "data", "endpoint")
    d = read_data(c["data"])
    sp = split(d, int(c.get("split_seed", 0)))
    targets = sp.val.features[:int(c.get("n_targets", 200))]
    return sp, targets


def cmd_attack1(args):
    c = _section(args, "attack1")
    sp, targets = _attack_data(c)
    aux = sp.aux.features[:int(c.get("aux_size", 800))]
    params = {k: c[k] for k in ("epochs", "learning_rate", "batch_size", "weight_decay",
                                "hidden_factor") if k in c}
    seed = int(c.get("seed", 0))
    with ServiceClient.from_endpoint(c["endpoint"], c.get("key", "attacker")) as client:
        S, X = build_pairs(aux, client)
        psi = InverseMappingAttack(random_state=seed, **params).fit(S, X)
        S_t = np.vstack([e.filled(0.0) for e in client.batch_explain(targets)])
    X_hat = psi.predict(S_t)
    if c.get("out"):
        save_model(psi, c["out"])
    _emit({"pairs": int(len(S)), "targets": int(len(targets)),
           "l1": l1_loss(X_hat, targets),
           "rg_e": l1_loss(rg_e(aux, len(targets), seed), targets),
           "reconstruction": _nan_to_none(X_hat) if c.get("print_rows") else None},
          c.get("report"))


def cmd_attack2(args):
    c = _section(args, "attack2")
    sp, targets = _attack_data(c)
    seed, m = int(c.get("seed", 0)), int(c.get("queries", 100))
    X_rand = gen_random_queries(targets.shape[1], m, seed)
    with ServiceClient.from_endpoint(c["endpoint"], c.get("key", "attacker")) as client:
        S_rand = np.vstack([e.shapley for e in client.batch_explain(X_rand)])
        S_t = np.vstack([e.shapley for e in client.batch_explain(targets)])
    params = {k: c[k] for k in ("m_c", "tau", "xi", "xi_fraction", "per_feature_range") if k in c}
    rec = InterpolationAttack(**params).fit(X_rand, S_rand).reconstruct(S_t)
    n_t, n = targets.shape
    summary = {"queries": m, "targets": n_t, "success_rate": success_rate(rec.values),
               "l1_recovered": l1_loss(rec.values, targets) if rec.recovered.any() else None,
               "rg_u": l1_loss(rg_u(n, n_t, seed), targets),
               "rg_n": l1_loss(rg_n(n, n_t, seed), targets)}
    if c.get("out"):
        Path(c["out"]).write_text(json.dumps(rec.to_dict()) + "\n")
    _emit(summary, c.get("report"))


def cmd_bound(args):
    c = _section(args, "bound")
    if c.get("width") is not None and c.get("b") is None:
        c["a"], c["b"] = float(c.get("a", 0.0)), float(c.get("a", 0.0)) + float(c["width"])
    _require(c, "u", "w", "k", "a", "b")
    try:
        rep = error_bound(float(c["u"]), float(c["w"]), int(c["k"]), float(c["a"]), float(c["b"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _emit({"error_radius": rep.error_radius, "confidence": rep.confidence,
           "u": rep.u, "w": rep.w, "k": rep.k, "a": rep.a, "b": rep.b})


def _read_explanations(path):
    rows, expl = [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            rows.append(rec.get("row"))
            expl.append(Explanation.from_dict(rec))
    return rows, expl


def cmd_defend(args):
    c = _section(args, "defend")
    _require(c, "explanations")
    rows, expl = _read_explanations(c["explanations"])
    if not expl:
        raise UsageError("no explanations in input")
    S = np.vstack([e.shapley for e in expl])
    levels, topk = c.get("quantize_levels"), c.get("topk")
    rng = c.get("range")
    if levels is not None:
        rng = tuple(rng) if rng is not None else calibrated_range(S)
    idx = c.get("topk_indices")
    if topk is not None and idx is None:
        idx = rank_by_shapley_variance(S)[:int(topk)].tolist()
    cfg = DefenseConfig(levels, rng if levels is not None else None, topk,
                        None if idx is None else tuple(int(i) for i in idx))
    text = "".join(json.dumps({"row": r, **apply_defense(e, cfg).to_dict()}) + "\n"
                   for r, e in zip(rows, expl))
    if c.get("out") not in (None, "-"):
        Path(c["out"]).write_text(text)
        print(f"wrote {len(expl)} defended explanations to {c['out']}")
    else:
        sys.stdout.write(text)


def _print_summary(table):
    print(f"{'setting':40s} {'attack':8s} {'seeds':>5s} {'l1':>15s} {'sr':>15s} {'rg_e':>7s}")
    for s in summarize(table):
        print(f"{s['setting']:40s} {s['attack']:8s} {s['seeds']:5d} "
              f"{s['l1'][0]:7.4f}±{s['l1'][1]:6.4f} {s['sr'][0]:7.4f}±{s['sr'][1]:6.4f} "
              f"{s['rg_e'][0]:7.4f}" + (f"  ({s['errors']} failed)" if s["errors"] else ""))


def cmd_experiment(args):
    c = _section(args, "experiment")
    out, plot = c.pop("out", None), c.pop("plot", None)
    cfg = ExperimentConfig.from_dict(c)

    def progress(r):
        status = r.error or f"l1={r.l1:.4f} sr={r.sr:.3f}"
        print(f"[{r.experiment_id}] {r.setting} {r.attack} seed={r.seed}: {status} "
              f"({r.wall_time:.1f}s)", file=sys.stderr, flush=True)

    table = run_experiment(cfg, progress=progress)
    if out:
        emit_csv(table, out)
    if plot:
        emit_plotdata(table, plot)
    _print_summary(table)
    if table.rows and all(not r.ok for r in table.rows):
        raise RuntimeError("every experiment row failed")


def cmd_report(args):
    c = _section(args, "report")
    _require(c, "results")
    table = read_csv(c["results"])
    if c.get("plot"):
        emit_plotdata(table, c["plot"], x=c.get("x", "queries"), y=c.get("y", "l1"))
    _print_summary(table)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shapleak", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML config file")
        sp.set_defaults(func=func)
        return sp

    g = add("gen-synth", cmd_gen_synth, "generate the synthetic dataset")
    g.add_argument("--n-features", dest="n_features", type=int)
    g.add_argument("--important-fraction", dest="important_fraction", type=float)
    g.add_argument("--n-samples", dest="n_samples", type=int)
    g.add_argument("--cluster-std", dest="cluster_std", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output path (.json or .csv)")

    t = add("train", cmd_train, "train a target model on the train split")
    t.add_argument("--data")
    t.add_argument("--kind", choices=["MLP", "RF", "GBDT", "KSVM"], type=str.upper)
    t.add_argument("--seed", type=int)
    t.add_argument("--param", action="append", type=_kv, help="hyper-parameter KEY=VALUE")
    t.add_argument("--out")

    e = add("explain", cmd_explain, "explain dataset rows locally")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--rows", type=int, nargs="+")
    e.add_argument("--n-rows", dest="n_rows", type=int)
    e.add_argument("--reference-row", dest="reference_row", type=int)
    e.add_argument("--method", choices=["exact", "sampled"])
    e.add_argument("--nu", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--target-class", dest="target_class", type=int)
    e.add_argument("--out")

    s = add("serve", cmd_serve, "run the explanation service")
    s.add_argument("--model")
    s.add_argument("--listen", help="host:port")
    s.add_argument("--method", choices=["exact", "sampled"])
    s.add_argument("--nu", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--target-class", dest="target_class", type=int)
    s.add_argument("--budget", action="append", type=_kv, help="API key budget KEY=N")

    for name, func in (("attack1", cmd_attack1), ("attack2", cmd_attack2)):
        a = add(name, func, f"run {name} against a running service")
        a.add_argument("--endpoint", help="host:port of the service")
        a.add_argument("--key", help="API key")
        a.add_argument("--data", help="dataset the service's model was trained on")
        a.add_argument("--split-seed", dest="split_seed", type=int)
        a.add_argument("--n-targets", dest="n_targets", type=int)
        a.add_argument("--seed", type=int)
        a.add_argument("--out")
        a.add_argument("--report", help="write the JSON summary here too")
        if name == "attack1":
            a.add_argument("--aux-size", dest="aux_size", type=int)
            a.add_argument("--epochs", type=int)
            a.add_argument("--learning-rate", dest="learning_rate", type=float)
            a.add_argument("--weight-decay", dest="weight_decay", type=float)
            a.add_argument("--batch-size", dest="batch_size", type=int)
        else:
            a.add_argument("--queries", type=int)
            a.add_argument("--m-c", dest="m_c", type=int)
            a.add_argument("--tau", type=float)
            a.add_argument("--xi", type=float)

    b = add("bound", cmd_bound, "error radius and confidence of an attack-2 estimate")
    b.add_argument("--u", type=float)
    b.add_argument("--w", type=float)
    b.add_argument("--k", type=int)
    b.add_argument("--a", type=float)
    b.add_argument("--b", type=float)
    b.add_argument("--width", type=float, help="b - a (with a defaulting to 0)")

    d = add("defend", cmd_defend, "apply quantization / top-k to an explanation file")
    d.add_argument("--explanations")
    d.add_argument("--quantize-levels", dest="quantize_levels", type=int)
    d.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    d.add_argument("--topk", type=int)
    d.add_argument("--out")

    x = add("experiment", cmd_experiment, "run an experiment sweep")
    x.add_argument("--name")
    x.add_argument("--seeds", type=int, nargs="+")
    x.add_argument("--queries", type=int, nargs="+")
    x.add_argument("--model-kinds", dest="model_kinds", nargs="+", type=str.upper)
    x.add_argument("--attacks", nargs="+", choices=["attack1", "attack2"])
    x.add_argument("--n-references", dest="n_references", type=int)
    x.add_argument("--val-size", dest="val_size", type=int)
    x.add_argument("--set", action="append", type=_kv, help="any config key, dotted.path=VALUE")
    x.add_argument("--out", help="results CSV")
    x.add_argument("--plot", help="plot-data CSV of (x, y, series)")

    r = add("report", cmd_report, "summarize a results CSV")
    r.add_argument("--results")
    r.add_argument("--plot")
    r.add_argument("--x")
    r.add_argument("--y")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors and --help come back as exit codes, not exceptions
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, *CONFIG_ERRORS) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
