"""Local pay-per-query explanation service and its clients.

Wire protocol: line-delimited JSON over TCP, one request object per line
and one response object per line.

Request::

    {"id": str, "key": str, "op": "explain", "features": [n reals]}

Response::

    {"id": str, "prediction": [c reals], "target_class": int,
     "shapley": [{"index": int, "value": real}, ...],
     "method": {"type": "exact" | "sampled", "nu": int | null},
     "remaining": int, "defense": {...}}

Error::

    {"id": str, "error": "BAD_REQUEST" | "BUDGET_EXHAUSTED" | "INTERNAL", "detail": str}

Sampled explanations use the per-request seed
``config_seed XOR first-8-bytes(sha256(request id))`` (masked to 63 bits), so
a replayed request id reproduces its response. The server also caches
answered ids per key: a resent id is answered again without being charged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from shapleak.defense import (
    DefenseConfig,
    apply_defense,
    calibrated_range,
    rank_by_shapley_variance,
)
from shapleak.explain import Explanation, ReferenceSample, exact_shapley, sampled_shapley
from shapleak.models import load_model

log = logging.getLogger(__name__)

BAD_REQUEST = "BAD_REQUEST"
BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"
INTERNAL = "INTERNAL"

LISTEN_ENV = "SHAPLEAK_LISTEN"
CALIBRATION_SIZE = 256


class ConfigError(ValueError):
    pass


class ServiceError(RuntimeError):
    """An error response from the service."""

    def __init__(self, code: str, detail: str, request_id: str = ""):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail
        self.request_id = request_id


class BudgetExhaustedError(ServiceError):
    pass


class TransportError(ConnectionError):
    pass


class BatchError(RuntimeError):
    """A batch stopped early; ``completed`` holds the answered prefix."""

    def __init__(self, completed, cause):
        super().__init__(f"batch stopped after {len(completed)} items: {cause}")
        self.completed = completed
        self.cause = cause


def derive_seed(config_seed: int, request_id: str) -> int:
    digest = hashlib.sha256(request_id.encode("utf-8")).digest()
    return (int(config_seed) ^ int.from_bytes(digest[:8], "big")) & ((1 << 63) - 1)


@dataclass(frozen=True)
class ServiceConfig:
    model_path: str | None
    reference: tuple[float, ...]
    reference_source: int | None = None
    method: str = "sampled"
    nu: int = 50
    seed: int = 0
    target_class: int | None = None
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    budgets: dict[str, int] = field(default_factory=dict)
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if self.method not in ("exact", "sampled"):
            raise ConfigError(f"method must be 'exact' or 'sampled', got {self.method!r}")
        if self.method == "sampled" and int(self.nu) < 1:
            raise ConfigError("nu must be >= 1")
        if any(int(v) < 0 for v in self.budgets.values()):
            raise ConfigError("budgets must be non-negative")
        if len(self.reference) == 0:
            raise ConfigError("reference sample is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceConfig":
        d = dict(d)
        ref = d.pop("reference", None)
        if isinstance(ref, dict):
            d.setdefault("reference_source", ref.get("source"))
            ref = ref.get("values")
        if ref is None:
            raise ConfigError("config needs a reference sample")
        listen = d.pop("listen", None)
        if listen:
            host, port = _parse_address(listen)
            d["host"], d["port"] = host, port
        defense = DefenseConfig.from_dict(d.pop("defense", None))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        budgets = {str(k): int(v) for k, v in (d.pop("budgets", None) or {}).items()}
        return cls(reference=tuple(float(v) for v in ref), defense=defense, budgets=budgets, **d)

    @classmethod
    def from_file(cls, path) -> "ServiceConfig":
        try:
            d = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        cfg = cls.from_dict(d)
        if cfg.model_path and not Path(cfg.model_path).is_absolute():
            cfg = replace(cfg, model_path=str(Path(path).parent / cfg.model_path))
        return cfg

    def with_env_overrides(self, environ=None) -> "ServiceConfig":
        environ = os.environ if environ is None else environ
        if environ.get(LISTEN_ENV):
            host, port = _parse_address(environ[LISTEN_ENV])
            return replace(self, host=host, port=port)
        return self


def _parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep:
        raise ConfigError(f"listen address must look like host:port, got {text!r}")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


@dataclass(frozen=True)
class QueryRecord:
    api_key: str
    timestamp: float
    sample_hash: str
    queries_used: int


class ExplanationService:
    """Request handler shared by the TCP server and in-process clients.

    The model, reference and resolved defense settings are immutable after
    construction; budgets, the answered-id cache and the query log are
    guarded by one lock so the per-key counter is linearizable.
    """

    def __init__(self, model, cfg: ServiceConfig):
        self.model = model
        self.cfg = cfg
        n = getattr(model, "n_features_in_", None)
        if n is not None and n != len(cfg.reference):
            raise ConfigError(f"reference has {len(cfg.reference)} features, model takes {n}")
        self.n_features = len(cfg.reference)
        self.reference = ReferenceSample(np.asarray(cfg.reference), cfg.reference_source)
        self.defense = self._resolve_defense(cfg.defense)
        self._lock = threading.Lock()
        self._budgets = dict(cfg.budgets)
        self._used: dict[str, int] = {k: 0 for k in cfg.budgets}
        self._answered: dict[tuple[str, str], dict] = {}
        self._pending: dict[tuple[str, str], threading.Event] = {}
        self.log: list[QueryRecord] = []

    @classmethod
    def from_config(cls, cfg: ServiceConfig) -> "ExplanationService":
        if not cfg.model_path:
            raise ConfigError("config has no model_path")
        return cls(load_model(cfg.model_path), cfg)

    def _explain(self, x, seed) -> Explanation:
        tc = self.cfg.target_class
        if self.cfg.method == "exact":
            return exact_shapley(self.model, x, self.reference, tc)
        return sampled_shapley(self.model, x, self.reference, tc, int(self.cfg.nu), seed)

    def _resolve_defense(self, d: DefenseConfig) -> DefenseConfig:
        needs_range = d.quantize_levels is not None and d.quantize_range is None
        needs_rank = d.topk is not None and d.topk_indices is None
        if not (needs_range or needs_rank):
            return d
        rng = np.random.default_rng(self.cfg.seed)
        X = rng.uniform(0.0, 1.0, size=(CALIBRATION_SIZE, self.n_features))
        S = np.vstack([self._explain(x, derive_seed(self.cfg.seed, f"calibration-{j}")).shapley
                       for j, x in enumerate(X)])
        if needs_range:
            d = replace(d, quantize_range=calibrated_range(S))
        if needs_rank:
            d = replace(d, topk_indices=tuple(int(i) for i in rank_by_shapley_variance(S)[:d.topk]))
        return d

    def remaining(self, key: str) -> int:
        with self._lock:
            return self._budgets.get(key, 0)

    def queries_used(self, key: str) -> int:
        with self._lock:
            return self._used.get(key, 0)

    def defense_echo(self) -> dict:
        # calibration data (the grid range) stays on the server
        return {"quantize_levels": self.defense.quantize_levels, "topk": self.defense.topk,
                "topk_indices": None if self.defense.topk_indices is None
                else list(self.defense.topk_indices)}

    @staticmethod
    def _error(rid, code, detail):
        return {"id": rid, "error": code, "detail": detail}

    def _parse(self, req):
        if not isinstance(req, dict):
            raise ValueError("request must be a JSON object")
        rid, key = req.get("id"), req.get("key")
        if not isinstance(rid, str) or not rid:
            raise ValueError("missing request id")
        if not isinstance(key, str):
            raise ValueError("missing api key")
        if req.get("op") != "explain":
            raise ValueError(f"unsupported op {req.get('op')!r}")
        feats = req.get("features")
        if not isinstance(feats, list) or len(feats) != self.n_features:
            raise ValueError(f"features must be a list of {self.n_features} numbers")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats):
            raise ValueError("features must be numeric")
        x = np.asarray(feats, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        return rid, key, x

    def handle(self, req) -> dict:
        rid = req.get("id", "") if isinstance(req, dict) else ""
        rid = rid if isinstance(rid, str) else ""
        try:
            rid, key, x = self._parse(req)
        except ValueError as exc:
            return self._error(rid, BAD_REQUEST, str(exc))

        slot = (key, rid)
        while True:
            with self._lock:
                if slot in self._answered:
                    return self._answered[slot]
                waiter = self._pending.get(slot)
                if waiter is None:
                    if key not in self._budgets:
                        return self._error(rid, BAD_REQUEST, "unknown api key")
                    if self._budgets[key] <= 0:
                        return self._error(rid, BUDGET_EXHAUSTED, f"no queries left for key {key!r}")
                    self._budgets[key] -= 1
                    self._pending[slot] = threading.Event()
                    break
            waiter.wait()

        try:
            expl = apply_defense(self._explain(x, derive_seed(self.cfg.seed, rid)), self.defense)
            pred = self.model.predict_proba(x[None, :])[0]
        except Exception as exc:  # noqa: BLE001 - every failure must refund and answer
            log.exception("explain failed for %s", rid)
            with self._lock:
                self._budgets[key] += 1
                self._pending.pop(slot).set()
            return self._error(rid, INTERNAL, f"{type(exc).__name__}: {exc}")

        with self._lock:
            self._used[key] = self._used.get(key, 0) + 1
            resp = {
                "id": rid,
                "prediction": [float(v) for v in pred],
                "target_class": int(expl.target_class),
                "shapley": [{"index": int(i), "value": float(expl.shapley[i])}
                            for i in np.flatnonzero(expl.released)],
                "method": {"type": expl.method, "nu": expl.nu},
                "remaining": self._budgets[key],
                "defense": self.defense_echo(),
            }
            self._answered[slot] = resp
            self.log.append(QueryRecord(key, time.time(),
                                        hashlib.sha256(x.tobytes()).hexdigest()[:16],
                                        self._used[key]))
            self._pending.pop(slot).set()
        return resp


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service: ExplanationService = self.server.service
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            try:
                req = json.loads(line)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                resp = ExplanationService._error("", BAD_REQUEST, f"malformed JSON: {exc}")
            else:
                resp = service.handle(req)
            try:
                self.wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
                self.wfile.flush()
            except OSError:
                return


class ServiceServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: ExplanationService, address):
        self.service = service
        super().__init__(address, _LineHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "ServiceServer":
        t = threading.Thread(target=self.serve_forever, daemon=True, name="shapleak-serve")
        t.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve(cfg: ServiceConfig, model=None, background: bool = True) -> ServiceServer:
    """Start the TCP service. Bind failures surface as ``OSError``."""
    service = ExplanationService(model, cfg) if model is not None else ExplanationService.from_config(cfg)
    server = ServiceServer(service, (cfg.host, cfg.port))
    log.info("serving on %s:%d", *server.address)
    if background:
        server.start()
    return server


@dataclass(frozen=True)
class QueryResult:
    prediction: np.ndarray
    explanation: Explanation
    remaining: int


def _decode(resp: dict, n: int | None) -> QueryResult:
    if "error" in resp:
        cls = BudgetExhaustedError if resp["error"] == BUDGET_EXHAUSTED else ServiceError
        raise cls(resp["error"], resp.get("detail", ""), resp.get("id", ""))
    entries = resp["shapley"]
    if n is None:
        n = max((e["index"] for e in entries), default=-1) + 1
    values = np.full(n, np.nan)
    present = np.zeros(n, dtype=bool)
    for e in entries:
        values[e["index"]] = e["value"]
        present[e["index"]] = True
    expl = Explanation(values, resp["target_class"], resp["method"]["type"],
                       resp["method"].get("nu"), "service", None,
                       None if present.all() else present)
    return QueryResult(np.asarray(resp["prediction"], dtype=np.float64), expl,
                       int(resp["remaining"]))


class _ClientBase:
    def __init__(self, api_key: str, id_prefix: str | None = None):
        self.api_key = api_key
        self.id_prefix = id_prefix if id_prefix is not None else f"{api_key}-{os.urandom(4).hex()}"
        self._counter = 0

    def next_id(self) -> str:
        self._counter += 1
        return f"{self.id_prefix}-{self._counter}"

    def _request(self, x, request_id):
        return {"id": request_id or self.next_id(), "key": self.api_key, "op": "explain",
                "features": [float(v) for v in np.asarray(x, dtype=np.float64)]}

    def query_explain(self, x, request_id: str | None = None) -> QueryResult:
        x = np.asarray(x, dtype=np.float64)
        return _decode(self._send(self._request(x, request_id)), x.size)

    def batch_query(self, X) -> list[QueryResult]:
        out = []
        for x in np.asarray(X, dtype=np.float64).reshape(len(X), -1) if len(X) else []:
            try:
                out.append(self.query_explain(x))
            except (ServiceError, TransportError) as exc:
                raise BatchError(out, exc) from exc
        return out

    def batch_explain(self, X) -> list[Explanation]:
        try:
            return [r.explanation for r in self.batch_query(X)]
        except BatchError as exc:
            raise BatchError([r.explanation for r in exc.completed], exc.cause) from exc.cause


class LocalClient(_ClientBase):
    """Calls an in-process :class:`ExplanationService` directly (no sockets)."""

    def __init__(self, service: ExplanationService, api_key: str, id_prefix: str | None = None):
        super().__init__(api_key, id_prefix)
        self.service = service

    def _send(self, req):
        return self.service.handle(req)


class ServiceClient(_ClientBase):
    """Synchronous single-connection TCP client.

    Transport failures reconnect and resend the same request id, which the
    server answers from its cache instead of charging again.
    """

    def __init__(self, host: str, port: int, api_key: str, id_prefix: str | None = None,
                 timeout: float = 30.0, retries: int = 3):
        super().__init__(api_key, id_prefix)
        self.host, self.port = host, int(port)
        self.timeout, self.retries = timeout, retries
        self._sock = None
        self._file = None

    @classmethod
    def from_endpoint(cls, endpoint: str, api_key: str, **kw) -> "ServiceClient":
        host, port = _parse_address(endpoint)
        return cls(host, port, api_key, **kw)

    def _connect(self):
        self.close()
        self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._file = self._sock.makefile("rwb")

    def close(self):
        for obj in (self._file, self._sock):
            if obj is not None:
                try:
                    obj.close()
                except OSError:
                    pass
        self._sock = self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, req):
        payload = (json.dumps(req) + "\n").encode("utf-8")
        last = None
        for _ in range(self.retries + 1):
            try:
                if self._file is None:
                    self._connect()
                self._file.write(payload)
                self._file.flush()
                line = self._file.readline()
                if not line:
                    raise ConnectionError("connection closed by server")
                return json.loads(line)
            except (OSError, ValueError) as exc:
                last = exc
                self.close()
        raise TransportError(f"request {req['id']} failed after {self.retries + 1} attempts: {last}")
