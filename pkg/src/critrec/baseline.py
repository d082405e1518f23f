"""Contractive-regime check against the closed-form Kesten tail index.

The chain engine and histogram are the ones used in the critical regime;
only the normalization changes (total mass instead of a reference interval).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .measure import EstimationError, LogHistogram, merge_all, run_ratio
from .model import ModelSpec, Regime
from .rng import RandomStream
from .schedule import map_replicas

DEFAULT_WINDOW = (10.0, 1e4)
MIN_POINTS = 8


def kesten_index(model: ModelSpec) -> float:
    """Positive root of E[A^alpha] = 1 for LogNormal(m, s^2) A: alpha* = -2m/s^2."""
    a = model.a_law
    if len(a.weights) != 1:
        raise ValueError("closed form needs a single LogNormal component")
    m, s = a.means[0], a.sds[0]
    if m >= 0:
        raise ValueError("the Kesten index needs E log A < 0")
    return -2.0 * m / (s * s)


@dataclass
class TailIndexFit:
    alpha: float
    stderr: float
    window: tuple
    n_points: int
    replica_alpha: Optional[np.ndarray] = None


def _ccdf(hist: LogHistogram, x: np.ndarray) -> np.ndarray:
    right, _ = hist.interval_mass(x, np.full_like(x, np.inf))
    left, _ = hist.interval_mass(np.full_like(x, -np.inf), -x)
    return right + left


def _slope_fit(lx, y):
    X = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    n = lx.size
    cov = np.linalg.inv(X.T @ X) * (resid @ resid) / max(n - 2, 1)
    return -coef[1], math.sqrt(cov[1, 1])


def fit_tail_index(hist: LogHistogram, window=DEFAULT_WINDOW) -> TailIndexFit:
    """Least-squares slope of log nu-hat(|t| > x) against log x over ``window``.

    Points sit on the bin edges inside the window, where the empirical
    complementary mass is exact.  The histogram is normalized by total mass.
    With replicas attached the stderr is their spread; otherwise it is the
    regression stderr (optimistic, the points share counts).
    """
    lo, hi = window
    if not 0 < lo < hi:
        raise ValueError("window must satisfy 0 < lo < hi")
    k = np.arange(math.ceil(math.log(lo) / hist.h - 1e-9), math.floor(math.log(hi) / hist.h + 1e-9) + 1)
    lx = k * hist.h
    x = np.exp(lx)

    def usable(hh):
        p = _ccdf(hh.probability(), x)
        return p > 0, p

    ok, p = usable(hist)
    if ok.sum() < MIN_POINTS:
        raise EstimationError(f"need >= {MIN_POINTS} usable points in the window, have {int(ok.sum())}")
    alpha, se = _slope_fit(lx[ok], np.log(p[ok]))
    reps = None
    if len(hist.replicas) > 1:
        vals = []
        for r in hist.replicas:
            rok, rp = usable(r)
            rok &= ok
            if rok.sum() >= MIN_POINTS:
                vals.append(_slope_fit(lx[rok], np.log(rp[rok]))[0])
        if len(vals) > 1:
            reps = np.array(vals)
            se = float(reps.std(ddof=1) / math.sqrt(reps.size))
    return TailIndexFit(float(alpha), float(se), (float(lo), float(hi)), int(ok.sum()), reps)


def _baseline_replica(model, per, seed, replica, purpose, geometry, x0, representation):
    return run_ratio(model, per, RandomStream(seed, replica, purpose), geometry, x0=x0,
                     representation=representation)


def contractive_histogram(model: ModelSpec, n_steps: int, rng, replicas: int = 1,
                          geometry: Optional[LogHistogram] = None, x0: Optional[float] = None,
                          representation: str = "log", workers: int = 1) -> LogHistogram:
    """Occupation histogram of ``replicas`` runs, each normalized to a probability."""
    if model.regime != Regime.CONTRACTIVE:
        raise ValueError("baseline runs need a contractive model")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    base = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    per = n_steps // replicas
    res = map_replicas(_baseline_replica, [(model, per, base.seed, r, base.purpose, geometry, x0, representation)
                                           for r in range(replicas)], workers)
    if any(r.aborted for r in res):
        raise OverflowError("a baseline replica left the representable range")
    runs = [r.hist for r in res]
    out = merge_all(runs).probability()
    if replicas > 1:
        out.replicas = tuple(h.probability() for h in runs)
    return out


@dataclass
class KestenBaselineReport:
    alpha_star_analytic: float
    alpha_star_fitted: float
    stderr: float
    fit_window: tuple
    n_steps: int

    @property
    def relative_error(self) -> float:
        return abs(self.alpha_star_fitted / self.alpha_star_analytic - 1.0)

    def to_text(self) -> str:
        return "\n".join([
            f"alpha_star_analytic: {self.alpha_star_analytic!r}",
            f"alpha_star_fitted: {self.alpha_star_fitted!r}",
            f"alpha_star_fitted_stderr: {self.stderr!r}",
            f"relative_error: {self.relative_error!r}",
            f"fit_window: [{self.fit_window[0]!r}, {self.fit_window[1]!r}]",
            f"n_steps: {self.n_steps}",
        ]) + "\n"


def kesten_baseline(model: ModelSpec, n_steps: int, rng, replicas: int = 8, window=DEFAULT_WINDOW,
                    geometry: Optional[LogHistogram] = None, workers: int = 1) -> KestenBaselineReport:
    hist = contractive_histogram(model, n_steps, rng, replicas, geometry, workers=workers)
    fit = fit_tail_index(hist, window)
    return KestenBaselineReport(kesten_index(model), fit.alpha, fit.stderr, fit.window,
                                int(hist.total_steps))
