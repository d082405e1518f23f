"""Run configuration: one YAML file plus command-line overrides.

Schema (every section optional except ``model``)::

    model: M1                      # preset, or a mapping:
    #  chain: affine | letac | extremal
    #  regime: critical | contractive
    #  delta: 1.0
    #  a: {mean: 0.0, variance: 0.25}          # LogNormal A
    #  a: {mixture: [{weight: .5, mean: .1, variance: .2}, ...]}
    #  b: {family: normal, mean: 0, variance: 1}
    #  c: {family: half_normal, scale: 1}
    #  d: {family: lognormal, mean: 0, variance: 1}
    run:
      seed: 1
      replicas: 8
      n_steps: 1e8                 # ratio estimator / trajectories
      n_cycles: 1e6                # ladder estimator
      estimator: ratio             # ratio | ladder | both
      cap: 1e8
      burn_cycles: 1000
      x0: null                     # number, null (model default) or embedded
      representation: log          # log | float
      workers: 1
      max_excluded: 1e-3
    histogram: {rho: 1.0644944589178593, k_min: -256, k_max: 767}
    tail:
      x_grid: {lo: 0, hi: 16, step: 0.0625}
      pairs: [[1, 2], [1, 4], [2, 8]]
      window: [8, 12]              # or auto
    constants:
      mc_draws: 5000
      psi_grid: {lo: -12, hi: 16, step: 0.0625}
      pair: [1, 2.718281828459045]
    baseline: {window: [10, 10000]}
    output: {dir: runs/m1}
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import yaml

from .model import REFERENCE_MODELS, ChainKind, Law, LogLaw, ModelError, ModelSpec, Regime, model_to_dict
from .schedule import default_workers

OUT_ENV = "CRITREC_OUT"
_TOP = {"model", "run", "histogram", "tail", "constants", "baseline", "output"}


class ConfigError(ValueError):
    """Bad configuration; the message names the field and, when known, the line."""


class AssumptionError(ModelError):
    """The configured model violates a standing assumption (located like ConfigError)."""


@dataclass
class RunConfig:
    model: ModelSpec
    model_source: object = None
    seed: int = 1
    replicas: int = 1
    n_steps: int = 10 ** 7
    n_cycles: int = 10 ** 5
    estimator: str = "ratio"
    cap: int = 10 ** 8
    burn_cycles: int = 1000
    x0: object = None
    representation: str = "log"
    workers: int = field(default_factory=default_workers)
    max_excluded: float = 1e-3
    rho: float = math.exp(1 / 16)
    k_min: int = -256
    k_max: int = 767
    x_grid: tuple = (0.0, 16.0, 0.0625)
    pairs: tuple = ((1.0, 2.0), (1.0, 4.0), (2.0, 8.0))
    window: object = (8.0, 12.0)
    mc_draws: int = 5000
    psi_grid: tuple = (-12.0, 16.0, 0.0625)
    pair: tuple = (1.0, math.e)
    baseline_window: tuple = (10.0, 1e4)
    out_dir: Optional[str] = None

    def fingerprint(self) -> str:
        """Hash of everything that determines the artifacts (not the output location)."""
        d = asdict(replace(self, model=None, model_source=None, out_dir=None, workers=0))
        d["model"] = model_to_dict(self.model)
        blob = json.dumps(d, sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_dir(self) -> str:
        if self.out_dir:
            return self.out_dir
        root = os.environ.get(OUT_ENV, "critrec-runs")
        return os.path.join(root, self.fingerprint())


class _Lines:
    """Line numbers of mapping keys and sequence items, by dotted path."""

    def __init__(self, text: str):
        self.map = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                self.map[path] = k.start_mark.line + 1
                self._walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self.map[f"{prefix}[{i}]"] = v.start_mark.line + 1
                self._walk(v, f"{prefix}[{i}]")

    def at(self, path: str) -> str:
        while path:
            if path in self.map:
                return f" (line {self.map[path]})"
            path = path.rsplit(".", 1)[0] if "." in path else ""
        return ""


class _Reader:
    def __init__(self, data: dict, lines: _Lines):
        self.data = data
        self.lines = lines

    def fail(self, path, msg):
        raise ConfigError(f"{path}: {msg}{self.lines.at(path)}")

    def assumption(self, path, err):
        raise AssumptionError(f"{path}: {err}{self.lines.at(path)}") from None

    def section(self, name):
        v = self.data.get(name, {})
        if v is None:
            return {}
        if not isinstance(v, dict):
            self.fail(name, "expected a mapping")
        return v

    def get(self, sec: dict, path: str, key: str, kind, default):
        full = f"{path}.{key}"
        if key not in sec or sec[key] is None:
            return default
        v = sec[key]
        try:
            if kind is int:
                f = float(v)
                if not f.is_integer():
                    raise ValueError
                return int(f)
            if kind is float:
                if isinstance(v, bool):
                    raise ValueError
                return float(v)
            if kind is str:
                if not isinstance(v, str):
                    raise ValueError
                return v
        except (TypeError, ValueError):
            self.fail(full, f"expected {kind.__name__}, got {v!r}")
        return v

    def check_keys(self, sec: dict, path: str, allowed):
        for k in sec:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else str(k), f"unknown key; expected one of {sorted(allowed)}")


def _law(r: _Reader, spec, path) -> Law:
    if not isinstance(spec, dict) or "family" not in spec:
        r.fail(path, "expected a mapping with a 'family' key")
    fam = spec["family"]
    params = {
        "constant": ("value",),
        "normal": ("mean", "variance"),
        "shifted_half_normal": ("shift", "scale"),
        "half_normal": ("scale",),
        "lognormal": ("mean", "variance"),
    }
    if fam not in params:
        r.fail(f"{path}.family", f"unknown family {fam!r}; expected one of {sorted(params)}")
    r.check_keys(spec, path, {"family", *params[fam]})
    vals = []
    for p in params[fam]:
        if p not in spec:
            r.fail(f"{path}.{p}", "missing")
        vals.append(r.get(spec, path, p, float, None))
    try:
        return getattr(Law, fam)(*vals)
    except ModelError as e:
        r.assumption(path, e)


def _a_law(r: _Reader, spec, path) -> LogLaw:
    if not isinstance(spec, dict):
        r.fail(path, "expected a mapping")
    try:
        if "mixture" in spec:
            r.check_keys(spec, path, {"mixture"})
            comps = spec["mixture"]
            if not isinstance(comps, list) or not comps:
                r.fail(f"{path}.mixture", "expected a non-empty list")
            w, m, v = [], [], []
            for i, c in enumerate(comps):
                cp = f"{path}.mixture[{i}]"
                if not isinstance(c, dict):
                    r.fail(cp, "expected a mapping")
                r.check_keys(c, cp, {"weight", "mean", "variance"})
                w.append(r.get(c, cp, "weight", float, None))
                m.append(r.get(c, cp, "mean", float, None))
                v.append(r.get(c, cp, "variance", float, None))
                if None in (w[-1], m[-1], v[-1]):
                    r.fail(cp, "needs weight, mean and variance")
            return LogLaw.mixture(w, m, v)
        r.check_keys(spec, path, {"mean", "variance"})
        m = r.get(spec, path, "mean", float, None)
        v = r.get(spec, path, "variance", float, None)
        if m is None or v is None:
            r.fail(path, "needs mean and variance")
        return LogLaw.lognormal(m, v)
    except ModelError as e:
        r.assumption(path, e)


def _model(r: _Reader, spec) -> ModelSpec:
    if spec is None:
        r.fail("model", "missing")
    if isinstance(spec, str):
        if spec not in REFERENCE_MODELS:
            r.fail("model", f"unknown preset {spec!r}; expected one of {sorted(REFERENCE_MODELS)}")
        return REFERENCE_MODELS[spec]()
    if not isinstance(spec, dict):
        r.fail("model", "expected a preset name or a mapping")
    r.check_keys(spec, "model", {"chain", "regime", "delta", "a", "b", "c", "d"})
    chain = r.get(spec, "model", "chain", str, None)
    kinds = {k.name.lower(): k for k in ChainKind}
    if chain not in kinds:
        r.fail("model.chain", f"expected one of {sorted(kinds)}")
    regime = r.get(spec, "model", "regime", str, "critical")
    if regime not in {g.value for g in Regime}:
        r.fail("model.regime", "expected critical or contractive")
    if "a" not in spec:
        r.fail("model.a", "missing")
    kw = {}
    for name in ("b", "c", "d"):
        if name in spec:
            kw[f"{name}_law"] = _law(r, spec[name], f"model.{name}")
    try:
        return ModelSpec(kinds[chain], _a_law(r, spec["a"], "model.a"),
                         delta=r.get(spec, "model", "delta", float, 0.5), regime=Regime(regime), **kw)
    except AssumptionError:
        raise
    except ModelError as e:
        r.assumption("model", e)


def _grid(r, sec, path, key, default):
    v = sec.get(key)
    if v is None:
        return default
    if not isinstance(v, dict):
        r.fail(f"{path}.{key}", "expected {lo, hi, step}")
    full = f"{path}.{key}"
    r.check_keys(v, full, {"lo", "hi", "step"})
    lo, hi, step = (r.get(v, full, k, float, d) for k, d in zip(("lo", "hi", "step"), default))
    if not (hi > lo and step > 0):
        r.fail(full, "need hi > lo and step > 0")
    return (lo, hi, step)


def _pair(r, v, path):
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        r.fail(path, "expected a two-element list")
    try:
        a, b = float(v[0]), float(v[1])
    except (TypeError, ValueError):
        r.fail(path, f"expected numbers, got {v!r}")
    return (a, b)


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a RunConfig; raises ConfigError with a field path and line."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"YAML syntax error{where}: {getattr(e, 'problem', e)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    r = _Reader(data, _Lines(text))
    r.check_keys(data, "", _TOP)
    cfg = RunConfig(model=_model(r, data.get("model")), model_source=data.get("model"))

    run = r.section("run")
    r.check_keys(run, "run", {"seed", "replicas", "n_steps", "n_cycles", "estimator", "cap", "burn_cycles",
                              "x0", "representation", "workers", "max_excluded"})
    for key, kind in (("seed", int), ("replicas", int), ("n_steps", int), ("n_cycles", int), ("cap", int),
                      ("burn_cycles", int), ("workers", int), ("max_excluded", float),
                      ("estimator", str), ("representation", str)):
        setattr(cfg, key, r.get(run, "run", key, kind, getattr(cfg, key)))
    x0 = run.get("x0")
    if x0 is not None and x0 != "embedded":
        x0 = r.get(run, "run", "x0", float, None)
    cfg.x0 = x0

    hist = r.section("histogram")
    r.check_keys(hist, "histogram", {"rho", "k_min", "k_max"})
    cfg.rho = r.get(hist, "histogram", "rho", float, cfg.rho)
    cfg.k_min = r.get(hist, "histogram", "k_min", int, cfg.k_min)
    cfg.k_max = r.get(hist, "histogram", "k_max", int, cfg.k_max)

    tail = r.section("tail")
    r.check_keys(tail, "tail", {"x_grid", "pairs", "window"})
    cfg.x_grid = _grid(r, tail, "tail", "x_grid", cfg.x_grid)
    if tail.get("pairs") is not None:
        if not isinstance(tail["pairs"], list) or not tail["pairs"]:
            r.fail("tail.pairs", "expected a non-empty list of [alpha, beta]")
        cfg.pairs = tuple(_pair(r, p, f"tail.pairs[{i}]") for i, p in enumerate(tail["pairs"]))
    w = tail.get("window")
    if w is not None:
        cfg.window = "auto" if w == "auto" else _pair(r, w, "tail.window")

    con = r.section("constants")
    r.check_keys(con, "constants", {"mc_draws", "psi_grid", "pair"})
    cfg.mc_draws = r.get(con, "constants", "mc_draws", int, cfg.mc_draws)
    cfg.psi_grid = _grid(r, con, "constants", "psi_grid", cfg.psi_grid)
    if con.get("pair") is not None:
        cfg.pair = _pair(r, con["pair"], "constants.pair")

    base = r.section("baseline")
    r.check_keys(base, "baseline", {"window"})
    if base.get("window") is not None:
        cfg.baseline_window = _pair(r, base["window"], "baseline.window")

    out = r.section("output")
    r.check_keys(out, "output", {"dir"})
    cfg.out_dir = r.get(out, "output", "dir", str, None)
    check(cfg, r.fail)
    return cfg


def check(cfg: RunConfig, fail=None):
    """Range checks shared by file parsing and flag overrides."""
    def bad(path, msg):
        if fail is not None:
            fail(path, msg)
        raise ConfigError(f"{path}: {msg}")

    if cfg.replicas < 1:
        bad("run.replicas", "must be >= 1")
    if not 0 <= cfg.seed < 2 ** 64:
        bad("run.seed", "must be a 64-bit unsigned integer")
    if cfg.n_steps < 0 or cfg.n_cycles < 0:
        bad("run", "n_steps and n_cycles must be >= 0")
    if cfg.estimator not in ("ratio", "ladder", "both"):
        bad("run.estimator", "expected ratio, ladder or both")
    if cfg.representation not in ("log", "float"):
        bad("run.representation", "expected log or float")
    if cfg.cap < 1:
        bad("run.cap", "must be >= 1")
    if cfg.workers < 1:
        bad("run.workers", "must be >= 1")
    if not cfg.rho > 1:
        bad("histogram.rho", "must be > 1")
    if cfg.k_max < cfg.k_min:
        bad("histogram", "k_max must be >= k_min")
    for i, (a, b) in enumerate(cfg.pairs):
        if not 0 < a < b:
            bad(f"tail.pairs[{i}]", "need 0 < alpha < beta")
    if cfg.window != "auto" and not cfg.window[0] < cfg.window[1]:
        bad("tail.window", "need lo < hi")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def grid(spec: tuple):
    """Inclusive uniform grid lo, lo+step, ..., hi."""
    lo, hi, step = spec
    n = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)
