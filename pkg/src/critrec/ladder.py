"""Downward ladder epochs of S_n = log(A_1 ... A_n) and per-cycle occupation sums.

Between two strict descending ladder epochs the chain performs one "cycle";
cycles started from the embedded chain W_k = X_{L_k} in stationarity give the
invariant measure as nu(f) = E[sum over the cycle of f(X_n)] (up to scale).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .chains import ChainState, Streams, default_x0, pack_a_law, pack_laws, regime_levels
from .measure import EPS0, REF_INTERVAL, EstimationError, LogHistogram, _batch_ratio_se, jackknife_replicas
from .model import ModelSpec, Regime
from .rng import RandomStream
from .schedule import map_replicas

log = logging.getLogger("critrec")

DEFAULT_CAP = 10 ** 8
DEFAULT_BURN_CYCLES = 10 ** 3
FUNCTIONALS = ("one", "ref", "exp_neg_s", "log_ratio")
_COLUMN = {"one": K.B_LEN, "ref": K.B_REF, "exp_neg_s": K.B_EXPNEG, "log_ratio": K.B_G}


@dataclass
class LadderEpoch:
    n: int
    s: float


@dataclass
class LadderTracker:
    """Strict descending ladder: an epoch is a step with S_n < S at the last epoch."""

    current_min: float = 0.0
    last_epoch: int = 0
    cycles_completed: int = 0

    def on_step(self, n: int, s: float) -> Optional[LadderEpoch]:
        if s < self.current_min:
            self.current_min = s
            self.last_epoch = n
            self.cycles_completed += 1
            return LadderEpoch(n, s)
        return None


def ladder_epochs(s_values) -> list:
    """Epoch indices (1-based) of a path S_1, S_2, ... started from S_0 = 0."""
    tr = LadderTracker()
    return [n for n, s in enumerate(s_values, start=1) if tr.on_step(n, float(s)) is not None]


class LadderSampler:
    """Stateful driver of the ladder kernel for one replica.

    Successive ``run`` calls continue the same chain and innovation streams,
    so splitting a run into pieces and merging their histograms reproduces
    the single run exactly.
    """

    def __init__(self, model: ModelSpec, start: Optional[float], stream: RandomStream,
                 geometry: Optional[LogHistogram] = None, cap: int = DEFAULT_CAP, ref=REF_INTERVAL,
                 gamma: float = 1.0, eps0: float = EPS0, main: str = "main", aux: str = "aux",
                 representation: str = "log", chunk: int = 1 << 22):
        if model.regime != Regime.CRITICAL:
            raise ValueError("ladder cycles are defined for the critical regime")
        self.model = model
        self.geometry = (geometry or LogHistogram()).empty_like()
        self.cap = int(cap)
        self.ref = ref
        self.gamma = float(gamma)
        self.eps0 = eps0
        self.chunk = chunk
        x0 = default_x0(model) if start is None else float(start)
        self.st = ChainState.start(x0, model, representation).to_array()
        self.cy = np.zeros(K.CYCLE_SIZE)
        self.cy[K.CY_GMIN] = np.inf
        self.ystar, self.xswitch = regime_levels(model, representation)
        self.law = pack_laws(model)
        self.kind = int(model.chain_kind)
        self.alaw = pack_a_law(model)
        self.g = Streams(stream, main=main, aux=aux)
        n = 2 * self.geometry.nb + 3
        self.pend = np.zeros(n)
        self.touched = np.zeros(n, dtype=np.int64)
        self.ntouched = np.zeros(1, dtype=np.int64)
        self.steps = 0

    @property
    def cycles_done(self) -> int:
        return int(self.cy[K.CY_DONE])

    @property
    def state(self) -> float:
        st = self.st
        if st[K.HIGH]:
            return st[K.SGN] * math.exp(min(st[K.LX], 709.0))
        return float(st[K.X])

    def run(self, n_cycles: int, record: bool = True, functional: bool = False,
            n_batches: int = 100) -> "LadderResult":
        hist = self.geometry.empty_like()
        stats = np.zeros((n_batches, K.BATCH_COLS))
        stats[:, K.B_HMAX] = -np.inf
        per_batch = max(1, -(-n_cycles // n_batches))
        offset = self.cycles_done
        target = offset + n_cycles
        ab0, abs0 = self.cy[K.CY_ABORTED], self.cy[K.CY_ABORTED_STEPS]
        inv_h = 1.0 / hist.h
        steps0 = self.steps
        g = self.g
        while self.cycles_done < target:
            used, status = K.ladder_run(
                self.kind, self.alaw, self.law, self.ystar, self.xswitch, self.st, self.cy, self.chunk,
                g.main, g.aux, record, hist.weights, self.pend, self.touched, self.ntouched, inv_h,
                hist.k_min, hist.nb, self.ref[0], self.ref[1], functional, g.fresh_log, g.fresh_aux,
                self.eps0, self.gamma, float(self.cap), float(target), stats, per_batch, float(offset))
            self.steps += used
            if status:
                raise OverflowError("ladder run left the representable range")
        hist.total_steps = float(stats[:, K.B_LEN].sum())
        return LadderResult(hist, stats, n_cycles, int(self.cy[K.CY_ABORTED] - ab0),
                            float(self.cy[K.CY_ABORTED_STEPS] - abs0), self.steps - steps0,
                            float(self.cy[K.CY_GMIN]), self.ref, self.cap)


@dataclass
class LadderResult:
    """Histogram and per-batch sums of one block of completed cycles.

    ``hist`` holds raw occupation counts; ``normalized_hist`` rescales to
    nu-hat(ref) = 1.  Cycles that hit the step cap are excluded and counted
    in ``aborted``.  ``parts`` keeps the raw histograms of merged independent
    replicas for jackknife error bars.
    """

    hist: LogHistogram
    stats: np.ndarray
    n_cycles: int
    aborted: int
    aborted_steps: float
    steps: int
    min_log_ratio: float
    ref: tuple
    cap: int
    parts: tuple = ()

    @property
    def excluded_fraction(self) -> float:
        return self.aborted / max(1, self.aborted + self.n_cycles)

    @property
    def heights(self) -> tuple:
        """Mean ladder height S_L - S_0 and its batch stderr."""
        return self._mean(K.B_HEIGHT)

    @property
    def max_height(self) -> float:
        return float(self.stats[:, K.B_HMAX].max())

    def _mean(self, col):
        c = self.stats[:, K.B_CYCLES]
        keep = c > 0
        tot = self.stats[keep, col].sum() / c[keep].sum()
        return float(tot), _batch_ratio_se(self.stats[keep, col], c[keep])

    def estimate(self, name: str) -> tuple:
        """(mean per cycle, stderr) of a built-in functional."""
        if name not in _COLUMN:
            raise KeyError(f"unknown functional {name!r}; choose from {FUNCTIONALS}")
        return self._mean(_COLUMN[name])

    def normalized_functional(self, name: str) -> tuple:
        """nu-hat(g) under nu-hat(ref) = 1: ratio of per-cycle sums, delta-method stderr."""
        col = _COLUMN[name]
        num, den = self.stats[:, col], self.stats[:, K.B_REF]
        if den.sum() <= 0:
            raise EstimationError("reference interval never visited")
        return float(num.sum() / den.sum()), _batch_ratio_se(num, den)

    @property
    def normalized_hist(self) -> LogHistogram:
        out = self.hist.normalized(self.ref)
        out.replicas = jackknife_replicas(self.parts, self.ref)
        return out

    def half_means(self, name: str) -> tuple:
        """Per-cycle means and stderrs over the first and second half of the batches."""
        col = _COLUMN[name]
        nb = self.stats.shape[0] // 2
        out = []
        for part in (self.stats[:nb], self.stats[nb:]):
            c = part[:, K.B_CYCLES]
            out.append((part[:, col].sum() / c.sum(), _batch_ratio_se(part[:, col], c)))
        return tuple(out)

    def merge(self, other: "LadderResult") -> "LadderResult":
        return LadderResult(self.hist.merge(other.hist), np.vstack([self.stats, other.stats]),
                            self.n_cycles + other.n_cycles, self.aborted + other.aborted,
                            self.aborted_steps + other.aborted_steps, self.steps + other.steps,
                            min(self.min_log_ratio, other.min_log_ratio), self.ref, self.cap,
                            (self.parts or (self.hist,)) + (other.parts or (other.hist,)))


def burn_in_embedded(model: ModelSpec, n_cycles: int, rng, cap: int = DEFAULT_CAP,
                     x0: Optional[float] = None, min_cycles: int = DEFAULT_BURN_CYCLES,
                     return_sampler: bool = False):
    """Run the chain through ``n_cycles`` ladder cycles and return W = X at the last epoch.

    The embedded chain is contractive, so W is approximately a draw from its
    stationary law.  An INFO diagnostic is logged when the mean ladder height of the
    two quarters making up the last half differs by more than 1%.
    """
    if n_cycles < min_cycles:
        raise ValueError(f"burn-in needs at least {min_cycles} cycles")
    stream = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    sampler = LadderSampler(model, x0, stream, cap=cap, main="burn", aux="burn_aux")
    res = sampler.run(n_cycles, record=False, n_batches=4)
    q = res.stats[2:, K.B_HEIGHT] / np.maximum(res.stats[2:, K.B_CYCLES], 1)
    if abs(q[1] - q[0]) > 0.01 * abs(q[0]):
        log.info("ladder height mean not stabilized over burn-in: %.4g vs %.4g", q[0], q[1])
    return (sampler.state, sampler) if return_sampler else sampler.state


def embedded_samples(model: ModelSpec, n_samples: int, rng, thin: int = 10, burn: int = DEFAULT_BURN_CYCLES,
                     cap: int = DEFAULT_CAP) -> np.ndarray:
    """States at every ``thin``-th ladder epoch after a burn-in."""
    _, sampler = burn_in_embedded(model, burn, rng, cap=cap, return_sampler=True)
    out = np.empty(n_samples)
    for i in range(n_samples):
        sampler.run(thin, record=False, n_batches=1)
        out[i] = sampler.state
    return out


def accumulate_cycles(model: ModelSpec, start: float, n_cycles: int, functionals: Sequence[str],
                      rng, cap: int = DEFAULT_CAP, geometry: Optional[LogHistogram] = None,
                      ref=REF_INTERVAL, gamma: float = 1.0, n_batches: int = 100):
    """Histogram and per-cycle functional means over ``n_cycles`` completed cycles.

    Returns ``(hist, estimates, result)``: the raw-count histogram, a map
    functional -> (mean per cycle, batch-means stderr), and the full
    ``LadderResult``.  ``log_ratio`` draws one fresh innovation per visit.
    """
    for f in functionals:
        if f not in FUNCTIONALS:
            raise KeyError(f"unknown functional {f!r}; choose from {FUNCTIONALS}")
    stream = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    sampler = LadderSampler(model, start, stream, geometry=geometry, cap=cap, ref=ref, gamma=gamma)
    res = sampler.run(n_cycles, functional="log_ratio" in functionals, n_batches=n_batches)
    return res.hist, {f: res.estimate(f) for f in functionals}, res


def _ladder_replica(model, per, seed, replica, burn, cap, functional, geometry, ref, n_batches):
    stream = RandomStream(seed, replica)
    w0 = burn_in_embedded(model, burn, stream.child(1), cap=min(cap, 10 ** 6))
    sampler = LadderSampler(model, w0, stream, geometry=geometry, cap=cap, ref=ref)
    return sampler.run(per, functional=functional, n_batches=n_batches)


def ladder_estimate(model: ModelSpec, n_cycles: int, seed: int, replicas: int = 1, burn: int = DEFAULT_BURN_CYCLES,
                    cap: int = DEFAULT_CAP, functional: bool = True, geometry: Optional[LogHistogram] = None,
                    ref=REF_INTERVAL, n_batches: int = 100, workers: int = 1) -> LadderResult:
    """Burn-in then ``n_cycles`` cycles split over independent replicas, merged.

    Replica r burns in on ``RandomStream(seed, r).child(1)`` and then runs on
    ``RandomStream(seed, r)``.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    per = n_cycles // replicas
    nb = max(1, n_batches // replicas)
    args = [(model, per, seed, r, burn, cap, functional, geometry, ref, nb) for r in range(replicas)]
    parts = map_replicas(_ladder_replica, args, workers)
    out = parts[0]
    for res in parts[1:]:
        out = out.merge(res)
    return out
