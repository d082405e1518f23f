"""Log-binned occupation measures, the ratio estimator and tail profiles.

The histogram is the empirical stand-in for the invariant measure.  Weights
live in one flat array of cells (layout documented in ``_kernels``); interval
masses are read off a cumulative sum with log-uniform apportionment inside a
bin, which is the right local shape for a measure behaving like dt/t.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .chains import ChainState, Streams, default_x0, pack_a_law, pack_laws, regime_levels
from .model import ChainKind, ModelSpec, Regime
from .rng import RandomStream
from .schedule import map_replicas

DEFAULT_H = 1.0 / 16.0
DEFAULT_K_MIN = -256
DEFAULT_K_MAX = 767
REF_INTERVAL = (1.0, math.e)
EPS0 = 1e-12


class EstimationError(RuntimeError):
    pass


@dataclass
class LogHistogram:
    """Occupation weights on geometric bins (rho^k, rho^(k+1)], rho = e^h.

    ``weights`` are raw counts until ``normalized`` rescales them so the
    reference interval carries mass 1; ``scale`` records that factor.
    ``replicas`` optionally holds jackknife pseudo-value histograms of a
    merged estimate (see ``jackknife_replicas``): any linear functional
    evaluated on them has mean ~ the estimate and spread / sqrt(len) ~ its
    standard error.
    """

    h: float = DEFAULT_H
    k_min: int = DEFAULT_K_MIN
    k_max: int = DEFAULT_K_MAX
    weights: np.ndarray = None
    total_steps: float = 0.0
    scale: float = 1.0
    normalization: str = "raw counts"
    replicas: tuple = ()

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("bin log-width must be positive")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if self.weights is None:
            self.weights = np.zeros(2 * self.nb + 3)
        elif self.weights.shape != (2 * self.nb + 3,):
            raise ValueError("weights do not match the bin geometry")

    @classmethod
    def with_base(cls, rho: float, k_min: int = DEFAULT_K_MIN, k_max: int = DEFAULT_K_MAX):
        return cls(h=math.log(rho), k_min=k_min, k_max=k_max)

    # geometry
    @property
    def nb(self) -> int:
        return self.k_max - self.k_min + 1

    @property
    def base(self) -> float:
        return math.exp(self.h)

    def same_geometry(self, other: "LogHistogram") -> bool:
        return (self.h, self.k_min, self.k_max) == (other.h, other.k_min, other.k_max)

    def empty_like(self) -> "LogHistogram":
        return LogHistogram(self.h, self.k_min, self.k_max)

    @property
    def edges(self) -> np.ndarray:
        """Cell boundaries: cell c is (edges[c], edges[c+1]]."""
        ks = np.arange(self.k_min, self.k_max + 2)
        pos = np.exp(ks * self.h)
        return np.concatenate([[-np.inf], -pos[::-1], pos, [np.inf]])

    @property
    def pos_bins(self) -> np.ndarray:
        return self.weights[self.nb + 2:2 * self.nb + 2]

    @property
    def neg_bins(self) -> np.ndarray:
        """Negative-side weights ordered by k = k_min .. k_max."""
        return self.weights[1:self.nb + 1][::-1]

    @property
    def near_zero(self) -> float:
        return float(self.weights[self.nb + 1])

    @property
    def overflow(self) -> tuple:
        return float(self.weights[0]), float(self.weights[-1])

    def cell_of(self, x: float) -> int:
        e = self.edges
        c = int(np.searchsorted(e, x, side="left")) - 1
        return max(c, 0)

    def bin_index(self, x: float):
        """(side, k) of the bin holding x; side is 'pos', 'neg' or 'zero'."""
        c = self.cell_of(x)
        nb = self.nb
        if c == nb + 1:
            return "zero", None
        if c == 0 or c == 2 * nb + 2:
            return ("neg" if c == 0 else "pos"), "overflow"
        if c > nb + 1:
            return "pos", self.k_min + (c - nb - 2)
        return "neg", self.k_min + (nb - c)

    # recording
    def record(self, x: float, weight: float = 1.0):
        self.weights[self.cell_of(x)] += weight
        self.total_steps += weight

    def record_many(self, xs):
        xs = np.asarray(xs, float)
        cells = np.searchsorted(self.edges, xs, side="left") - 1
        self.weights += np.bincount(np.maximum(cells, 0), minlength=self.weights.size)
        self.total_steps += xs.size

    def merge(self, other: "LogHistogram") -> "LogHistogram":
        if not self.same_geometry(other):
            raise ValueError("cannot merge histograms with different bin geometry")
        if self.scale != other.scale:
            raise ValueError("cannot merge histograms under different normalizations")
        return replace(self, weights=self.weights + other.weights,
                       total_steps=self.total_steps + other.total_steps, replicas=())

    # interval masses
    def cdf(self, y) -> tuple:
        """Mass of (-inf, y] and a flag for y inside an overflow cell."""
        y = np.asarray(y, float)
        e = self.edges
        cum = np.concatenate([[0.0], np.cumsum(self.weights)])
        c = np.clip(np.searchsorted(e, y, side="left") - 1, 0, self.weights.size - 1)
        nb = self.nb
        lo, hi = e[c], e[c + 1]
        frac = np.zeros_like(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = (c > nb + 1) & (c < 2 * nb + 2)
            frac = np.where(pos, (np.log(np.where(pos, y, 1.0)) - np.log(np.where(pos, lo, 1.0))) / self.h, frac)
            neg = (c >= 1) & (c <= nb)
            frac = np.where(neg, (np.log(np.where(neg, -lo, 1.0)) - np.log(np.where(neg, -y, 1.0))) / self.h, frac)
            mid = c == nb + 1
            frac = np.where(mid, (y - lo) / np.where(mid, hi - lo, 1.0), frac)
        frac = np.clip(np.nan_to_num(frac), 0.0, 1.0)
        truncated = ((c == 0) & (y > -np.inf)) | ((c == 2 * nb + 2) & (y < np.inf))
        # an endpoint beyond the last bin counts no overflow mass; -inf and +inf are exact
        value = cum[c] + frac * self.weights[c]
        value = np.where(y == np.inf, cum[-1], value)
        value = np.where(y == -np.inf, 0.0, value)
        value = np.where((c == 0) & (y > -np.inf), cum[1], value)
        return value, truncated

    def interval_mass(self, p, q) -> tuple:
        """Mass of (p, q] (zero where q <= p) and a truncation flag per interval."""
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        fp, tp = self.cdf(p)
        fq, tq = self.cdf(q)
        m = np.where(q > p, fq - fp, 0.0)
        if self.weights.min() >= 0:
            m = np.maximum(m, 0.0)   # cumsum round-off; pseudo-value histograms may be signed
        return m, (tp | tq) & (q > p)

    def mass(self, p, q) -> float:
        return float(self.interval_mass(p, q)[0])

    # normalization
    def normalized(self, ref=REF_INTERVAL) -> "LogHistogram":
        """Copy rescaled so the reference interval has mass 1."""
        raw = self.mass(*ref) / self.scale
        if raw <= 0:
            raise EstimationError("reference interval has zero occupation; run too short")
        s = 1.0 / raw
        return replace(self, weights=self.weights * (s / self.scale), scale=s,
                       normalization=f"nu({ref[0]:.6g}, {ref[1]:.6g}] = 1")

    def probability(self) -> "LogHistogram":
        """Copy rescaled to total mass 1 (contractive runs)."""
        raw = float(self.counts.sum())
        if raw <= 0:
            raise EstimationError("empty histogram")
        return replace(self, weights=self.counts / raw, scale=1.0 / raw, normalization="total mass = 1")

    @property
    def counts(self) -> np.ndarray:
        """Raw occupation counts (weights with the normalization undone)."""
        return self.weights / self.scale

    def midpoints(self) -> np.ndarray:
        """Log-midpoint of every cell (0 for the near-zero cell, edge for overflow)."""
        e = self.edges
        nb = self.nb
        mids = np.empty(self.weights.size)
        mids[0] = e[1]
        mids[-1] = e[-2]
        mids[nb + 1] = 0.0
        pos = np.arange(nb + 2, 2 * nb + 2)
        mids[pos] = np.sqrt(e[pos] * e[pos + 1])
        neg = np.arange(1, nb + 1)
        mids[neg] = -np.sqrt(e[neg] * e[neg + 1])
        return mids

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["side", "k", "lo", "hi", "weight"])
        e = self.edges
        for c in range(self.weights.size):
            side, k = self._label(c)
            w.writerow([side, k, repr(float(e[c])), repr(float(e[c + 1])), repr(float(self.weights[c]))])
        return buf.getvalue()

    def _label(self, c):
        nb = self.nb
        if c == 0:
            return "neg", "overflow"
        if c == 2 * nb + 2:
            return "pos", "overflow"
        if c == nb + 1:
            return "zero", ""
        if c > nb + 1:
            return "pos", self.k_min + (c - nb - 2)
        return "neg", self.k_min + (nb - c)


def merge_all(hists: Sequence[LogHistogram]) -> LogHistogram:
    out = hists[0]
    for h in hists[1:]:
        out = out.merge(h)
    return out


def jackknife_replicas(raw: Sequence[LogHistogram], ref=REF_INTERVAL, groups: int = 32) -> tuple:
    """Jackknife pseudo-value histograms of the pooled normalized estimate.

    Replicas are pooled into at most ``groups`` contiguous groups.  With
    nu-hat the pooled estimate and nu-hat_(-i) the one leaving group i out,
    pseudo-value i is G nu-hat - (G - 1) nu-hat_(-i).  Pooled ratio estimates
    stay well defined when single replicas rarely visit ``ref``, which is
    where normalizing each replica on its own breaks down.
    """
    if len(raw) < 2:
        return ()
    g = min(groups, len(raw))
    parts = np.array_split(np.arange(len(raw)), g)
    counts = np.array([sum(raw[i].counts for i in part) for part in parts])
    total = counts.sum(axis=0)
    proto = raw[0].empty_like()

    def norm(w):
        return replace(proto, weights=w).normalized(ref).weights

    full = norm(total)
    out = []
    for i in range(g):
        w = g * full - (g - 1) * norm(total - counts[i])
        out.append(replace(proto, weights=w, scale=1.0, normalization=f"jackknife pseudo-value {i}"))
    return tuple(out)


# ratio estimator

@dataclass
class RatioRun:
    """Raw output of one trajectory: counts plus functional sums.

    ``g_sum`` accumulates log|Phi'(x)/(A' x)| over visits with a fresh
    innovation per visit; ``batches`` holds per-time-batch (steps, ref, g).
    """

    hist: LogHistogram
    n_steps: int
    ref_count: float
    g_sum: float
    g_excluded: float
    batches: np.ndarray
    aborted: bool = False
    eps0: float = EPS0


def run_ratio(model: ModelSpec, n_steps: int, stream: RandomStream, geometry: Optional[LogHistogram] = None,
              x0: Optional[float] = None, functional: bool = False, ref=REF_INTERVAL, eps0: float = EPS0,
              n_batches: int = 100, representation: str = "log") -> RatioRun:
    hist = (geometry or LogHistogram()).empty_like()
    x0 = default_x0(model) if x0 is None else float(x0)
    state = ChainState.start(x0, model, representation)
    st = state.to_array()
    ystar, xswitch = regime_levels(model, representation)
    law = pack_laws(model)
    kind = int(model.chain_kind)
    g = Streams(stream)
    alaw = pack_a_law(model)
    acc = np.zeros(4)
    batch_len = max(1, -(-n_steps // n_batches))
    batches = np.zeros((n_batches, 3))
    status = K.ratio_run(kind, alaw, law, ystar, xswitch, st, n_steps, g.main, g.aux, hist.weights,
                         1.0 / hist.h, hist.k_min, hist.nb, ref[0], ref[1], functional, g.fresh_log,
                         g.fresh_aux, eps0, acc, batches, batch_len)
    done = int(st[K.NSTEP])
    aborted = bool(status)
    hist.total_steps = float(done)
    return RatioRun(hist, done, acc[K.R_REF], acc[K.R_G], acc[3], batches, aborted, eps0)


@dataclass
class RatioEstimate:
    """Ratio-estimator result over independent replicas."""

    hist: LogHistogram
    runs: list
    ref: tuple

    @property
    def n_steps(self) -> int:
        return sum(r.n_steps for r in self.runs)

    @property
    def aborted(self) -> bool:
        return any(r.aborted for r in self.runs)

    def functional(self):
        """nu-hat of the log-ratio functional (per unit reference mass) and its stderr."""
        vals = np.array([r.g_sum / r.ref_count for r in self.runs])
        total = sum(r.g_sum for r in self.runs) / sum(r.ref_count for r in self.runs)
        if len(vals) > 1:
            return total, float(vals.std(ddof=1) / math.sqrt(len(vals)))
        return total, _batch_ratio_se(self.runs[0].batches[:, 2], self.runs[0].batches[:, 1])

    def excluded_fraction(self) -> float:
        ex = sum(r.g_excluded for r in self.runs)
        return ex / max(1.0, sum(r.n_steps for r in self.runs))


def _batch_ratio_se(num, den) -> float:
    """Delta-method stderr of sum(num)/sum(den) from batch sums."""
    keep = den > 0
    num, den = num[keep], den[keep]
    b = num.size
    if b < 2:
        return math.nan
    r = num.sum() / den.sum()
    resid = num - r * den
    return float(math.sqrt(b / (b - 1) * np.sum(resid ** 2)) / den.sum())


def _ratio_replica(model, per, seed, replica, purpose, geometry, x0, functional, ref, eps0,
                   representation, burn_cycles, burn_cap) -> RatioRun:
    stream = RandomStream(seed, replica, purpose)
    start = x0
    if isinstance(x0, str):
        if x0 != "embedded":
            raise ValueError("x0 must be a number, None or 'embedded'")
        from .ladder import burn_in_embedded
        start = burn_in_embedded(model, burn_cycles, stream, cap=burn_cap)
    return run_ratio(model, per, stream, geometry, x0=start, functional=functional, ref=ref,
                     eps0=eps0, representation=representation)


def ratio_estimate(model: ModelSpec, n_steps: int, rng, replicas: int = 1, ref=REF_INTERVAL,
                   geometry: Optional[LogHistogram] = None, functional: bool = False,
                   eps0: float = EPS0, x0=None, representation: str = "log",
                   burn_cycles: int = 1000, burn_cap: int = 10 ** 6, workers: int = 1) -> RatioEstimate:
    """Run ``replicas`` independent chains of ``n_steps // replicas`` steps each.

    Replica r uses the substreams of ``RandomStream(seed, r)``, so any subset
    of replicas can be reproduced on its own.  ``x0="embedded"`` starts each
    replica from its own ladder-epoch state after ``burn_cycles`` cycles,
    which removes most of the start-up excess of reference visits a chain
    started at the bottom of the support accumulates.  If a replica overflows
    (float representation) the histogram is left as raw counts.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    base = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    per = n_steps // replicas
    args = [(model, per, base.seed, r, base.purpose, geometry, x0, functional, ref, eps0,
             representation, burn_cycles, burn_cap) for r in range(replicas)]
    runs = map_replicas(_ratio_replica, args, workers)
    if any(r.aborted for r in runs):
        # partial result: raw counts, the caller decides what to do with it
        return RatioEstimate(merge_all([r.hist for r in runs]), runs, ref)
    merged = merge_all([r.hist for r in runs]).normalized(ref)
    merged.replicas = jackknife_replicas([r.hist for r in runs], ref)
    return RatioEstimate(merged, runs, ref)


def estimate_ratio(model: ModelSpec, n_steps: int, rng, ref_interval=REF_INTERVAL, replicas: int = 1,
                   **kw) -> LogHistogram:
    """Occupation histogram of a long trajectory normalized so nu-hat(ref) = 1."""
    if model.regime != Regime.CRITICAL:
        raise ValueError("the ratio estimator targets the critical regime")
    return ratio_estimate(model, n_steps, rng, replicas, ref=ref_interval, **kw).hist


# tail profiles

@dataclass
class TailProfile:
    alpha: float
    beta: float
    x: np.ndarray
    f_hat: np.ndarray
    stderr: np.ndarray
    hits: np.ndarray
    replica_f: Optional[np.ndarray] = None
    normalization: str = ""

    @property
    def log_ratio(self) -> float:
        return math.log(self.beta / self.alpha)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "f_hat", "stderr"])
        for x, f, s in zip(self.x, self.f_hat, self.stderr):
            w.writerow([repr(float(x)), repr(float(f)), repr(float(s))])
        return buf.getvalue()


def tail_profile(hist: LogHistogram, alpha: float, beta: float, x_grid, side: str = "pos") -> TailProfile:
    """f(x) = nu-hat(alpha e^x, beta e^x] (or the mirrored negative interval).

    Points whose interval reaches past the binned range are NaN ("missing").
    Error bars come from the replica spread when replicas are attached, else
    from Poisson counting on raw hits (an underestimate for correlated paths).
    """
    if not 0 < alpha < beta:
        raise ValueError("need 0 < alpha < beta")
    if hist.h > math.log(beta / alpha) / 8 + 1e-15:
        raise ValueError("bins too coarse for this (alpha, beta)")
    x = np.asarray(x_grid, float)
    if np.any(np.diff(x) <= 0):
        raise ValueError("x grid must be strictly increasing")

    def prof(hh):
        if side == "pos":
            m, tr = hh.interval_mass(alpha * np.exp(x), beta * np.exp(x))
        else:
            m, tr = hh.interval_mass(-beta * np.exp(x), -alpha * np.exp(x))
        lo_ok = alpha * np.exp(x) >= math.exp(hh.k_min * hh.h)
        return np.where(tr | ~lo_ok, np.nan, m)

    f = prof(hist)
    raw = replace(hist, weights=hist.counts, scale=1.0)
    hits = np.nan_to_num(prof(raw))
    rep = None
    if len(hist.replicas) > 1:
        rep = np.array([prof(r) for r in hist.replicas])
        se = rep.std(axis=0, ddof=1) / math.sqrt(rep.shape[0])
    else:
        se = np.sqrt(hits) * hist.scale
    return TailProfile(alpha, beta, x, f, se, hits, rep, hist.normalization)


@dataclass
class PlateauFit:
    level: float
    slope: float
    level_stderr: float
    slope_stderr: float
    window: tuple
    midpoint: float
    n_points: int
    log_ratio: float

    @property
    def slope_compatible_with_zero(self) -> bool:
        return abs(self.slope) <= 2 * self.slope_stderr

    @property
    def c_plateau(self) -> float:
        return self.level / self.log_ratio

    @property
    def c_plateau_stderr(self) -> float:
        return self.level_stderr / self.log_ratio


def _wls(x, y, w, mid):
    X = np.column_stack([np.ones_like(x), x - mid])
    W = w[:, None]
    cov = np.linalg.inv(X.T @ (W * X))
    beta = cov @ (X.T @ (w * y))
    return beta, cov


def fit_plateau(profile: TailProfile, window) -> PlateauFit:
    """Weighted line level + slope (x - midpoint) through the profile on a window."""
    lo, hi = window
    sel = (profile.x >= lo) & (profile.x <= hi)
    sel &= np.isfinite(profile.f_hat)
    n = int(sel.sum())
    if n == 0:
        raise EstimationError("window has no usable points")
    if n < 8:
        raise EstimationError(f"need >= 8 grid points in the window, have {n}")
    x = profile.x[sel]
    y = profile.f_hat[sel]
    se = profile.stderr[sel]
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        w = np.ones_like(x)
    else:
        w = 1.0 / se ** 2
    mid = 0.5 * (x[0] + x[-1])
    beta, cov = _wls(x, y, w, mid)
    if profile.replica_f is not None:
        reps = profile.replica_f[:, sel]
        fits = np.array([_wls(x, r, w, mid)[0] for r in reps if np.all(np.isfinite(r))])
        r = fits.shape[0]
        level_se, slope_se = fits.std(axis=0, ddof=1) / math.sqrt(r)
    else:
        # point errors are correlated through shared bins; scale by the residual spread
        resid = y - (beta[0] + beta[1] * (x - mid))
        chi2 = float(np.sum(w * resid ** 2) / max(n - 2, 1))
        level_se, slope_se = np.sqrt(np.diag(cov) * max(chi2, 1.0))
    return PlateauFit(float(beta[0]), float(beta[1]), float(level_se), float(slope_se),
                      (float(lo), float(hi)), float(mid), n, profile.log_ratio)


def default_window(profile: TailProfile, min_hits: float = 1e3) -> tuple:
    """Largest contiguous x-range whose grid points all have >= min_hits raw hits."""
    ok = (profile.hits >= min_hits) & np.isfinite(profile.f_hat)
    best = (0, -1)
    start = None
    for i, flag in enumerate(np.append(ok, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - 1 - start > best[1] - best[0]:
                best = (start, i - 1)
            start = None
    if best[1] < best[0]:
        raise EstimationError("no grid point reaches the hit threshold")
    return float(profile.x[best[0]]), float(profile.x[best[1]])


# integrability checks

def weighted_mass(hist: LogHistogram, fn, bound: float) -> float:
    """sum over cells with |midpoint| <= bound of fn(midpoint) * weight."""
    mids = hist.midpoints()
    keep = np.abs(mids) <= bound
    keep[0] = keep[-1] = False
    return float(np.sum(fn(mids[keep]) * hist.weights[keep]))


def moment_stabilization(hist: LogHistogram, gamma: float = 0.5, window: float = math.exp(10.0)):
    """nu-hat((1+|x|)^-gamma) on |x| <= W and on |x| <= 2W, and their relative change."""
    fn = lambda t: (1.0 + np.abs(t)) ** (-gamma)
    m1 = weighted_mass(hist, fn, window)
    m2 = weighted_mass(hist, fn, 2 * window)
    return m1, m2, abs(m2 - m1) / m1


def growth_ratio(hist: LogHistogram, gamma: float = 0.1, log_x=None) -> np.ndarray:
    """nu-hat[-x, x] / (1 + x^gamma) along a grid of log x."""
    if log_x is None:
        log_x = np.arange(0.0, (hist.k_max + 1) * hist.h, 0.5)
    xs = np.exp(np.asarray(log_x, float))
    m, _ = hist.interval_mass(-xs, xs)
    # the closed end at -x carries no atom for a continuous law
    return m / (1.0 + xs ** gamma)
