"""Poisson defect psi, its moments, and the tail-constant formulas.

With f(x) = nu(alpha e^x, beta e^x] and (mu-bar * f)(x) = E f(x - log A), the
defect psi = mu-bar * f - f is computed straight from its definition against
a normalized histogram, using the same innovation for both interval masses
(common random numbers).  The residual path exists only as a check.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .measure import EPS0, LogHistogram, PlateauFit, RatioEstimate, TailProfile
from .model import ChainKind, ModelSpec, sample_innovation, validate
from .rng import RandomStream


class GridTooNarrowError(ValueError):
    pass


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomStream):
        return rng.generator("mc")
    return np.random.Generator(np.random.PCG64(int(rng)))


# convolution with mu-bar

def log_a_quantile(model: ModelSpec, tail: float = 1e-4) -> float:
    """Bound q with P(|log A| > q) <= tail (union bound over mixture components)."""
    a = model.a_law
    z = stats.norm.isf(tail / 2)
    return max(abs(m) + z * s for m, s in zip(a.means, a.sds))


@dataclass
class GridFunction:
    x: np.ndarray
    values: np.ndarray
    stderr: Optional[np.ndarray] = None
    clipped_fraction: float = 0.0


def mu_bar_convolve(f, x_grid, model: ModelSpec, mc_draws: int, rng, at=None, max_clipped: float = 1e-3):
    """(mu-bar * f)(x) = E f(x - log A) by Monte Carlo with linear interpolation.

    ``f`` is given by its values on ``x_grid``.  Evaluation points ``at``
    default to the grid points whose shifts stay inside the grid for all but
    1e-4 of the A-law.  Shifts leaving the grid are clipped to the end values
    and counted; more than ``max_clipped`` of them is an error.
    """
    x_grid = np.asarray(x_grid, float)
    f = np.asarray(f, float)
    gen = _generator(rng)
    if at is None:
        q = log_a_quantile(model)
        at = x_grid[(x_grid - q >= x_grid[0]) & (x_grid + q <= x_grid[-1])]
        if at.size == 0:
            raise GridTooNarrowError("grid narrower than the spread of log A")
    at = np.asarray(at, float)
    vals = np.empty(at.size)
    se = np.empty(at.size)
    clipped = 0
    for i, x in enumerate(at):
        u = x - model.a_law.sample_log(gen, mc_draws)
        clipped += int(np.count_nonzero((u < x_grid[0]) | (u > x_grid[-1])))
        fv = np.interp(u, x_grid, f)
        vals[i] = fv.mean()
        se[i] = fv.std(ddof=1) / math.sqrt(mc_draws) if mc_draws > 1 else 0.0
    frac = clipped / (at.size * mc_draws)
    if frac > max_clipped:
        raise GridTooNarrowError(f"clipped mass fraction {frac:.3g} exceeds {max_clipped:g}")
    return GridFunction(at, vals, se, frac)


# psi from its definition

def _preimage_masses(hist: LogHistogram, model: ModelSpec, lo, hi, inn):
    """nu of s -> a s preimage and of the chain-map preimage of (lo, hi]; plus truncation."""
    a = inn["a"]
    m1, t1 = hist.interval_mass(lo / a, hi / a)
    kind = model.chain_kind
    if kind == ChainKind.AFFINE:
        b = inn["b"]
        m2, t2 = hist.interval_mass((lo - b) / a, (hi - b) / a)
    elif kind == ChainKind.LETAC:
        b, c = inn["b"], inn["c"]
        p, q = (lo - b) / a, (hi - b) / a
        # s -> b + a max(c, s): flat at b + a c for s <= c, increasing above
        left = np.where(c > q, np.inf, np.where(c > p, -np.inf, p))
        right = np.where(c > q, np.inf, q)
        m2, t2 = hist.interval_mass(left, right)
    else:
        d = inn["d"]
        # s -> max(a s, d): flat at d for a s <= d
        left = np.where(d > hi, np.inf, np.where(d > lo, -np.inf, lo / a))
        right = np.where(d > hi, np.inf, hi / a)
        m2, t2 = hist.interval_mass(left, right)
    return m1, m2, t1 | t2


@dataclass
class PsiGrid:
    alpha: float
    beta: float
    x: np.ndarray
    psi: np.ndarray
    stderr: np.ndarray
    method: str
    mc_stderr: Optional[np.ndarray] = None
    replica_psi: Optional[np.ndarray] = None
    truncated_fraction: float = 0.0

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def log_ratio(self) -> float:
        return math.log(self.beta / self.alpha)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("x,psi,stderr,method\n")
        for x, p, s in zip(self.x, self.psi, self.stderr):
            buf.write(f"{float(x)!r},{float(p)!r},{float(s)!r},{self.method}\n")
        return buf.getvalue()


def psi_from_definition(model: ModelSpec, nu: LogHistogram, alpha: float, beta: float, x_grid,
                        mc_draws: int, rng) -> PsiGrid:
    """psi(x) = E[nu(a-preimage of I_x) - nu(chain-map preimage of I_x)], I_x = (alpha e^x, beta e^x].

    Innovations are drawn independently per grid point and shared between
    the merged histogram and its replicas, so the replica spread isolates the
    error of nu-hat while the draw-to-draw spread gives the Monte Carlo error.
    """
    x = np.asarray(x_grid, float)
    gen = _generator(rng)
    hists = [nu] + list(nu.replicas)
    vals = np.empty((len(hists), x.size))
    mc_se = np.empty(x.size)
    trunc = 0
    for i, xi in enumerate(x):
        inn = sample_innovation(model, gen, mc_draws)
        lo, hi = alpha * math.exp(xi), beta * math.exp(xi)
        for j, hh in enumerate(hists):
            m1, m2, tr = _preimage_masses(hh, model, lo, hi, inn)
            d = m1 - m2
            vals[j, i] = d.mean()
            if j == 0:
                mc_se[i] = d.std(ddof=1) / math.sqrt(mc_draws) if mc_draws > 1 else 0.0
                trunc += int(tr.sum())
    rep = vals[1:] if len(hists) > 2 else None
    se = mc_se.copy()
    if rep is not None:
        se = np.sqrt(mc_se ** 2 + rep.var(axis=0, ddof=1) / rep.shape[0])
    return PsiGrid(alpha, beta, x, vals[0], se, "FromDefinition", mc_se, rep, trunc / (x.size * mc_draws))


def psi_from_residual(profile: TailProfile, model: ModelSpec, mc_draws: int, rng) -> PsiGrid:
    """psi = mu-bar * f - f on the interior of the profile grid (a check, never a source)."""
    conv = mu_bar_convolve(profile.f_hat, profile.x, model, mc_draws, rng)
    idx = np.searchsorted(profile.x, conv.x)
    f = profile.f_hat[idx]
    se = np.sqrt(conv.stderr ** 2 + profile.stderr[idx] ** 2)
    return PsiGrid(profile.alpha, profile.beta, conv.x, conv.values - f, se, "FromResidual")


@dataclass
class PoissonResidual:
    x: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray
    sup_residual: float

    @property
    def z(self) -> np.ndarray:
        return np.abs(self.residual) / self.stderr

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("x,residual,stderr\n")
        for x, r, s in zip(self.x, self.residual, self.stderr):
            buf.write(f"{float(x)!r},{float(r)!r},{float(s)!r}\n")
        return buf.getvalue()


def poisson_residual(f_profile: TailProfile, psi: PsiGrid, model: ModelSpec, mc_draws: int, rng,
                     window=None) -> PoissonResidual:
    """r(x) = (mu-bar * f)(x) - f(x) - psi(x) on interior points shared by both grids.

    Combined stderr adds the three error sources in quadrature; f-hat and
    psi-hat come from the same histogram, so this is conservative.
    """
    if f_profile.alpha != psi.alpha or f_profile.beta != psi.beta:
        raise ValueError("profile and psi use different (alpha, beta)")
    if psi.method == "FromResidual" and np.array_equal(psi.x, f_profile.x):
        raise ValueError("grid mismatch")
    common = np.intersect1d(np.round(f_profile.x, 12), np.round(psi.x, 12))
    if common.size == 0:
        raise ValueError("grid mismatch: profile and psi share no points")
    q = log_a_quantile(model)
    interior = common[(common - q >= f_profile.x[0]) & (common + q <= f_profile.x[-1])]
    if window is not None:
        interior = interior[(interior >= window[0]) & (interior <= window[1])]
    conv = mu_bar_convolve(f_profile.f_hat, f_profile.x, model, mc_draws, rng, at=interior)
    fi = np.searchsorted(np.round(f_profile.x, 12), interior)
    pi = np.searchsorted(np.round(psi.x, 12), interior)
    r = conv.values - f_profile.f_hat[fi] - psi.psi[pi]
    se = np.sqrt(conv.stderr ** 2 + f_profile.stderr[fi] ** 2 + psi.stderr[pi] ** 2)
    return PoissonResidual(interior, r, se, float(np.max(np.abs(r))) if r.size else 0.0)


def poisson_residual_exact(f_profile: TailProfile, psi: PsiGrid, conv: GridFunction) -> np.ndarray:
    """Residual against a precomputed convolution (used when psi itself came from it)."""
    fi = np.searchsorted(f_profile.x, conv.x)
    pi = np.searchsorted(psi.x, conv.x)
    return conv.values - f_profile.f_hat[fi] - psi.psi[pi]


# smoothing and moments

def smooth(g, h: float, return_edge_bound: bool = False):
    """g-check(t) = int_{-inf}^t e^-(t-u) g(u) du on a uniform grid, g = 0 left of it.

    Exact recurrence g-check(t+h) = e^-h g-check(t) + int_t^{t+h} e^-(t+h-u) g(u) du
    with the increment by trapezoid.  The edge bound is the largest possible
    contribution of the ignored left part, max|g| e^-(t - t0), when g keeps its
    edge size.
    """
    g = np.asarray(g, float)
    out = np.empty_like(g)
    decay = math.exp(-h)
    acc = 0.0
    out[0] = 0.0
    for i in range(1, g.size):
        acc = decay * acc + 0.5 * h * (decay * g[i - 1] + g[i])
        out[i] = acc
    if return_edge_bound:
        bound = abs(g[0]) * np.exp(-h * np.arange(g.size))
        return out, bound
    return out


def trapezoid(y, h: float) -> float:
    y = np.asarray(y, float)
    return float(h * (y.sum() - 0.5 * (y[0] + y[-1])))


@dataclass
class FirstMoments:
    c1: float
    c2: float
    c1_stderr: float
    c2_stderr: float


def c1_c2_from_psi(psi: PsiGrid, decay_tol: float = 1e-3) -> FirstMoments:
    """C1 = int psi, C2 = -int (x+1) psi by trapezoid on the psi grid."""
    x, p = psi.x, psi.psi
    h = psi.h
    if not np.allclose(np.diff(x), h, rtol=1e-9, atol=1e-12):
        raise ValueError("psi grid must be uniform")
    peak = np.max(np.abs(p))
    if peak > 0 and max(abs(p[0]), abs(p[-1])) >= decay_tol * peak:
        raise GridTooNarrowError("psi does not decay at the grid ends; widen the grid")
    w1 = np.full(x.size, h)
    w1[[0, -1]] *= 0.5
    w2 = -w1 * (x + 1.0)
    c1, c2 = float(w1 @ p), float(w2 @ p)
    mc = psi.mc_stderr if psi.mc_stderr is not None else psi.stderr
    v1 = float(np.sum((w1 * mc) ** 2))
    v2 = float(np.sum((w2 * mc) ** 2))
    if psi.replica_psi is not None:
        r = psi.replica_psi.shape[0]
        v1 += float(np.var(psi.replica_psi @ w1, ddof=1) / r)
        v2 += float(np.var(psi.replica_psi @ w2, ddof=1) / r)
    return FirstMoments(c1, c2, math.sqrt(v1), math.sqrt(v2))


# D1 and the closed constant formulas

@dataclass
class D1Estimate:
    d1_plus: float
    stderr: float
    positive_b_term: float = 0.0
    negative_b_term: float = 0.0
    truncated_fraction: float = 0.0
    structural: bool = False


def d1_plus(model: ModelSpec, nu: LogHistogram, mc_draws: int, rng) -> D1Estimate:
    """Signed mass of states pushed across 0 by one step.

    Affine: -E[1{b>=0} nu(-b/a, 0]] + E[1{b<0} nu(0, -b/a]].  For Letac the
    support sits in [delta, inf) and the image stays above delta, so the
    value is structurally 0.  Extremal states are positive likewise.
    """
    if model.chain_kind != ChainKind.AFFINE:
        return D1Estimate(0.0, 0.0, structural=True)
    gen = _generator(rng)
    hists = [nu] + list(nu.replicas)
    inn = sample_innovation(model, gen, mc_draws)
    a, b = inn["a"], inn["b"]
    edge = -b / a
    out = []
    zero = np.zeros_like(edge)
    up = b >= 0
    for hh in hists:
        left, t1 = hh.interval_mass(np.where(up, edge, 0.0), zero)
        right, t2 = hh.interval_mass(zero, np.where(up, 0.0, edge))
        pos_b = -np.where(up, left, 0.0)
        neg_b = np.where(up, 0.0, right)
        out.append((pos_b + neg_b, pos_b.mean(), neg_b.mean(), (t1 | t2).mean()))
    vals, t_pos, t_neg, tr = out[0]
    var = vals.var(ddof=1) / mc_draws
    if len(hists) > 2:
        reps = np.array([o[0].mean() for o in out[1:]])
        var += reps.var(ddof=1) / reps.size
    return D1Estimate(float(vals.mean()), math.sqrt(var), float(t_pos), float(t_neg), float(tr))


@dataclass
class ConstantEstimate:
    value: float
    stderr: float
    excluded_fraction: float = 0.0
    detail: dict = field(default_factory=dict)


def c_sum_affine(model: ModelSpec, ratio: RatioEstimate) -> ConstantEstimate:
    """C+ + C- = (2/sigma^2) nu(E log|(A s + B)/(A s)|), nu-integral along the path.

    ``ratio`` must come from ``ratio_estimate(..., functional=True)``; visits
    with |A' s| < eps0 are excluded and counted.
    """
    if model.chain_kind != ChainKind.AFFINE:
        raise ValueError("c_sum_affine needs an affine model")
    sigma2 = validate(model).sigma2
    g, se = ratio.functional()
    k = 2.0 / sigma2
    return ConstantEstimate(float(k * g), float(k * se), float(ratio.excluded_fraction()),
                            {"nu_g": g, "eps0": ratio.runs[0].eps0, "sigma2": sigma2})


def c_plus_formula_letac(model: ModelSpec, ladder) -> ConstantEstimate:
    """C+ = (2/sigma^2) nu(E log(Phi(s)/(A s))) from a ladder run with the log-ratio functional.

    ``ladder`` is a ``LadderResult``; the nu-integral is the per-cycle mean
    of the functional divided by the per-cycle occupation of the reference
    interval (the nu-hat(I_ref) = 1 convention).
    """
    if model.chain_kind != ChainKind.LETAC:
        raise ValueError("c_plus_formula_letac needs a Letac model")
    sigma2 = validate(model).sigma2
    g, se = ladder.normalized_functional("log_ratio")
    k = 2.0 / sigma2
    return ConstantEstimate(float(k * g), float(k * se), float(ladder.excluded_fraction),
                            {"nu_g": g, "sigma2": sigma2, "min_integrand": ladder.min_log_ratio})


@dataclass
class PlateauMomentLink:
    branch: str
    plateau: float
    plateau_stderr: float
    predicted: float
    predicted_stderr: float
    z: float
    relative_gap: float


def plateau_moment_link(plateau: PlateauFit, moments: FirstMoments, sigma2: float, slope_profile=None,
                   z_c1: float = 3.0) -> PlateauMomentLink:
    """Compare the plateau level with 2 C2 / sigma^2 (or the slope with 2 C1 / sigma^2).

    The level branch applies when C1 is compatible with 0 at ``z_c1``.
    """
    k = 2.0 / sigma2
    if abs(moments.c1) <= z_c1 * max(moments.c1_stderr, 1e-300):
        pred, pse = k * moments.c2, k * moments.c2_stderr
        obs, ose = plateau.level, plateau.level_stderr
        branch = "level"
    else:
        pred, pse = k * moments.c1, k * moments.c1_stderr
        obs, ose = plateau.slope, plateau.slope_stderr
        branch = "slope"
    comb = math.hypot(pse, ose)
    z = (obs - pred) / comb if comb > 0 else (0.0 if obs == pred else math.inf)
    gap = abs(obs - pred) / abs(obs) if obs != 0 else math.inf
    return PlateauMomentLink(branch, obs, ose, pred, pse, z, gap)


@dataclass
class ConstantsReport:
    sigma2: float
    c1: tuple
    c2: tuple
    d1_plus: tuple
    c_plus_plateau: tuple
    c_minus_plateau: Optional[tuple] = None
    c_plus_formula: Optional[tuple] = None
    c_sum: Optional[tuple] = None
    normalization: str = ""
    fingerprint: str = ""
    alpha: float = 1.0
    beta: float = math.e
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"model_fingerprint = {self.fingerprint}",
                 f"normalization = {self.normalization}",
                 f"alpha = {self.alpha!r}", f"beta = {self.beta!r}",
                 f"sigma2 = {self.sigma2!r}  # E[log^2 A], analytic"]
        for name in ("c1", "c2", "d1_plus", "c_plus_plateau", "c_minus_plateau", "c_plus_formula", "c_sum"):
            v = getattr(self, name)
            if v is None:
                continue
            lines.append(f"{name} = {float(v[0])!r} +- {float(v[1])!r}")
        for n in self.notes:
            lines.append(f"# {n}")
        return "\n".join(lines) + "\n"
