"""Step functions and trajectory simulation for the three recursions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .model import ChainKind, ModelSpec
from .rng import RandomStream

CHUNK = 1 << 16

class ChainOverflow(RuntimeError):
    """The state left the double-precision range under ``representation='float'``."""


def step_affine(x, a, b):
    return a * x + b


def step_letac(x, a, b, c):
    return b + a * max(c, x)


def step_extremal(x, a, d):
    return max(a * x, d)


def default_x0(model: ModelSpec) -> float:
    return model.delta if model.chain_kind == ChainKind.LETAC else 0.0


@dataclass
class ChainState:
    """Current state of one chain.

    Above the model's inert level the state is carried as ``log_abs`` and
    ``sign``; ``x`` is then the (possibly infinite) float rendering.
    """

    x: float
    s: float = 0.0
    n: int = 0
    log_abs: float = field(default=None)
    sign: float = 1.0
    high: bool = False
    s_comp: float = 0.0
    aborted: bool = False
    diagnostic: Optional[str] = None

    def __post_init__(self):
        if self.log_abs is None:
            self.log_abs = math.log(abs(self.x)) if self.x != 0 else -math.inf
            self.sign = -1.0 if self.x < 0 else 1.0

    @classmethod
    def start(cls, x0: float, model: ModelSpec, representation="log"):
        st = cls(float(x0))
        if representation == "log" and st.log_abs > model.inert_level():
            st.high = True
        return st

    def to_array(self) -> np.ndarray:
        out = np.zeros(K.STATE_SIZE)
        out[K.X] = self.x
        out[K.LX] = self.log_abs
        out[K.SGN] = self.sign
        out[K.HIGH] = 1.0 if self.high else 0.0
        out[K.S] = self.s
        out[K.SCOMP] = self.s_comp
        out[K.NSTEP] = self.n
        return out

    def load(self, arr: np.ndarray):
        self.high = bool(arr[K.HIGH])
        self.log_abs = float(arr[K.LX])
        self.sign = float(arr[K.SGN])
        if self.high:
            self.x = self.sign * (math.exp(self.log_abs) if self.log_abs < 709.0 else math.inf)
        else:
            self.x = float(arr[K.X])
            self.log_abs = math.log(abs(self.x)) if self.x != 0 else -math.inf
            self.sign = -1.0 if self.x < 0 else 1.0
        self.s = float(arr[K.S])
        self.s_comp = float(arr[K.SCOMP])
        self.n = int(arr[K.NSTEP])


def pack_laws(model: ModelSpec) -> np.ndarray:
    out = np.full(9, -1.0)
    for i, law in enumerate((model.b_law, model.c_law, model.d_law)):
        if law is not None:
            out[3 * i:3 * i + 3] = law.packed()
    return out


def regime_levels(model: ModelSpec, representation: str = "log"):
    """(ystar, xswitch) passed to the kernels."""
    if representation == "float":
        return math.inf, math.inf
    if representation != "log":
        raise ValueError("representation must be 'log' or 'float'")
    ystar = model.inert_level()
    return ystar, math.exp(ystar)


def pack_a_law(model: ModelSpec) -> np.ndarray:
    """A-law as rows (cumulative weight, mean, sd) of its log-normal components."""
    a = model.a_law
    cw = np.cumsum(a.weights)
    cw[-1] = 1.0
    return np.array([cw, a.means, a.sds], dtype=float)


class Streams:
    """The numpy Generators a kernel draws from, taken from one RandomStream."""

    def __init__(self, stream: RandomStream, main: str = "main", aux: str = "aux"):
        self.main = stream.generator(main)
        self.aux = stream.generator(aux)
        self.fresh_log = stream.generator("fresh_log")
        self.fresh_aux = stream.generator("fresh_aux")


def simulate(model: ModelSpec, x0: Optional[float], n_steps: int, rng: RandomStream,
             sinks: Sequence = (), representation: str = "log", chunk: int = CHUNK) -> ChainState:
    """Run the chain for ``n_steps`` transitions, feeding every observer.

    An observer is either an object with ``on_chunk(n0, x, log_abs, s, innov)``
    receiving arrays for a block of consecutive steps (``n0`` is the index of
    the first one, counted from 1), or a plain callable ``f(n, x, s, innov)``
    called once per step.  ``innov`` holds ``a``, ``b`` and ``c`` (Letac) or
    ``a`` and ``d`` (Extremal); auxiliary values are NaN for steps taken in
    the log-represented regime, where they are never drawn.

    Overflow of the float representation stops the run and returns the state
    reached with ``aborted=True``.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    x0 = default_x0(model) if x0 is None else x0
    state = ChainState.start(x0, model, representation)
    ystar, xswitch = regime_levels(model, representation)
    law = pack_laws(model)
    kind = int(model.chain_kind)
    g = Streams(rng)
    alaw = pack_a_law(model)
    st = state.to_array()
    chunk_obs = [o for o in sinks if hasattr(o, "on_chunk")]
    step_obs = [o for o in sinks if not hasattr(o, "on_chunk")]
    done = 0
    out = np.empty((6, min(chunk, max(n_steps, 1))))
    while done < n_steps:
        m = min(chunk, n_steps - done)
        k, status = K.trajectory(kind, alaw, law, ystar, xswitch, st, m, g.main, g.aux, out)
        if k and (chunk_obs or step_obs):
            _notify(model, chunk_obs, step_obs, done + 1, out[:, :k])
        done += k
        if status:
            state.load(st)
            state.aborted = True
            state.diagnostic = f"state left the representable range at step {done + 1}"
            return state
    state.load(st)
    return state


def _notify(model, chunk_obs, step_obs, n0, out):
    innov = {"a": np.exp(out[3])}
    if model.chain_kind == ChainKind.EXTREMAL:
        innov["d"] = out[4]
    else:
        innov["b"] = out[4]
        if model.chain_kind == ChainKind.LETAC:
            innov["c"] = out[5]
    for o in chunk_obs:
        o.on_chunk(n0, out[0], out[1], out[2], innov)
    for o in step_obs:
        for i in range(out.shape[1]):
            o(n0 + i, float(out[0, i]), float(out[2, i]), {k: float(v[i]) for k, v in innov.items()})


class TrajectoryRecorder:
    """Observer that keeps the whole path in memory (small runs only)."""

    def __init__(self):
        self._parts = {"x": [], "log_abs": [], "s": []}
        self._innov = {}

    def on_chunk(self, n0, x, log_abs, s, innov):
        self._parts["x"].append(x.copy())
        self._parts["log_abs"].append(log_abs.copy())
        self._parts["s"].append(s.copy())
        for k, v in innov.items():
            self._innov.setdefault(k, []).append(np.array(v, copy=True))

    def __getattr__(self, name):
        parts = self.__dict__.get("_parts", {})
        if name in parts:
            return np.concatenate(parts[name]) if parts[name] else np.empty(0)
        innov = self.__dict__.get("_innov", {})
        if name in innov:
            return np.concatenate(innov[name])
        raise AttributeError(name)


@dataclass
class SandwichResult:
    """Log-levels of the lower comparison chain, the Letac chain and the upper chain.

    Row ``i`` of ``log_paths`` holds log X_1 .. log X_n for chain ``i``.
    ``violations`` counts steps where lower <= letac <= upper failed and
    ``support_violations`` steps where the Letac state fell below delta.
    """

    log_paths: Optional[np.ndarray]
    n_steps: int
    violations: int
    support_violations: int
    aborted: bool = False

    @property
    def lower(self):
        return np.exp(self.log_paths[0])

    @property
    def letac(self):
        return np.exp(self.log_paths[1])

    @property
    def upper(self):
        return np.exp(self.log_paths[2])


def simulate_coupled_sandwich(model: ModelSpec, x0: Optional[float], n_steps: int, rng: RandomStream,
                              store: bool = True) -> SandwichResult:
    """Letac chain and its two affine comparison chains on one innovation stream.

    lower: X' = A X' + B, upper: X'' = A X'' + B + A C.  Needs x0 >= 0: for a
    negative start the upper chain drops below the Letac chain whenever C > x0.
    """
    if model.chain_kind != ChainKind.LETAC:
        raise ValueError("the sandwich is defined for the Letac chain")
    x0 = model.delta if x0 is None else float(x0)
    if x0 < 0:
        raise ValueError("sandwich ordering needs x0 >= 0")
    ystar, xswitch = regime_levels(model)
    law = pack_laws(model)
    g = Streams(rng)
    alaw = pack_a_law(model)
    st3 = np.array([x0, x0, x0, 0.0, 0.0, 0.0, 0.0])
    if x0 > xswitch:
        st3[3:6] = math.log(x0)
        st3[6] = 1.0
    counts = np.zeros(2, dtype=np.int64)
    paths = np.empty((3, n_steps)) if store else np.empty((3, 0))
    status = K.sandwich_run(alaw, law, ystar, xswitch, st3, n_steps, g.main, g.aux, model.delta,
                            store, paths, 0, counts)
    aborted = bool(status)
    done = n_steps
    return SandwichResult(paths, done, int(counts[0]), int(counts[1]), aborted)


def path_from_innovations(model: ModelSpec, x0: float, a, b=None, c=None) -> np.ndarray:
    """Deterministic path X_0..X_n for explicit innovation arrays (double precision)."""
    a = np.asarray(a, float)
    b = np.zeros_like(a) if b is None else np.asarray(b, float)
    c = np.zeros_like(a) if c is None else np.asarray(c, float)
    return K.path_from_innovations(int(model.chain_kind), float(x0), a, b, c)
