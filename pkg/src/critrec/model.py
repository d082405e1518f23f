"""Input laws for the three recursions and the assumption checks they must pass.

Every supported family has closed-form log-moments, so ``validate`` never
samples.  Criticality (E log A = 0) is a structural property of the
parameters: a critical ``ModelSpec`` whose A-law is not exactly centred is
rejected at construction time.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np


class ModelError(ValueError):
    """Raised when a model violates a structural assumption."""


class ChainKind(enum.IntEnum):
    AFFINE = 0
    LETAC = 1
    EXTREMAL = 2


class Regime(str, enum.Enum):
    CRITICAL = "critical"
    CONTRACTIVE = "contractive"


# Law codes shared with the numba kernels.
CONSTANT = 0
NORMAL = 1
SHIFTED_HALF_NORMAL = 2
LOGNORMAL = 3

# Quantile multiplier used for "practically sure" bounds (P(|Z| > 12) ~ 3.6e-33).
_Z_SURE = 12.0


@dataclass(frozen=True)
class Law:
    """A one-dimensional law from a small closed set of families.

    ``Law.normal(m, s2)`` takes the *variance*, matching the N(m, s^2)
    notation used throughout.
    """

    family: str
    p1: float = 0.0
    p2: float = 0.0

    @classmethod
    def constant(cls, c):
        return cls("constant", float(c), 0.0)

    @classmethod
    def normal(cls, m, s2):
        if s2 < 0:
            raise ModelError("variance must be >= 0")
        return cls("normal", float(m), math.sqrt(s2))

    @classmethod
    def shifted_half_normal(cls, delta, s):
        if s < 0:
            raise ModelError("scale must be >= 0")
        return cls("shifted_half_normal", float(delta), float(s))

    @classmethod
    def half_normal(cls, s):
        return cls.shifted_half_normal(0.0, s)

    @classmethod
    def lognormal(cls, m, s2):
        if s2 < 0:
            raise ModelError("variance must be >= 0")
        return cls("lognormal", float(m), math.sqrt(s2))

    @property
    def code(self) -> int:
        return {
            "constant": CONSTANT,
            "normal": NORMAL,
            "shifted_half_normal": SHIFTED_HALF_NORMAL,
            "lognormal": LOGNORMAL,
        }[self.family]

    def packed(self):
        return (float(self.code), self.p1, self.p2)

    def ess_inf(self) -> float:
        if self.family == "constant":
            return self.p1
        if self.family == "shifted_half_normal":
            return self.p1
        if self.family == "lognormal":
            return 0.0
        return -math.inf if self.p2 > 0 else self.p1

    def abs_bound(self) -> float:
        """Upper bound on |value| holding outside an event of probability ~1e-32."""
        m, s = self.p1, self.p2
        if self.family == "constant":
            return abs(m)
        if self.family == "normal":
            return abs(m) + _Z_SURE * s
        if self.family == "shifted_half_normal":
            return abs(m) + _Z_SURE * s
        return math.exp(m + _Z_SURE * s)

    def abs_moment(self, p: float) -> float:
        """E|V|^p in closed form where available, quadrature otherwise; inf when it diverges."""
        m, s = self.p1, self.p2
        if self.family == "lognormal":
            return math.exp(p * m + 0.5 * p * p * s * s)
        if self.family == "constant" or s == 0:
            if m == 0:
                return 0.0 if p > 0 else math.inf
            return abs(m) ** p
        if p <= -1 and not (self.family == "shifted_half_normal" and m > 0):
            return math.inf
        return _numeric_abs_moment(self, p)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        m, s = self.p1, self.p2
        if self.family == "constant":
            return np.full(size, m)
        z = rng.standard_normal(size)
        if self.family == "normal":
            return m + s * z
        if self.family == "shifted_half_normal":
            return m + s * np.abs(z)
        return np.exp(m + s * z)


def _numeric_abs_moment(law: Law, p: float) -> float:
    from scipy import integrate

    m, s = law.p1, law.p2
    dens = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    if law.family == "normal":
        val, _ = integrate.quad(lambda z: abs(m + s * z) ** p * dens(z), -np.inf, np.inf,
                                points=None, limit=200)
        return val
    val, _ = integrate.quad(lambda z: (m + s * z) ** p * 2 * dens(z), 0, np.inf, limit=200)
    return val


@dataclass(frozen=True)
class LogLaw:
    """Law of A > 0 given through log A: a finite mixture of normals.

    A single component is the LogNormal(m, s^2) family.
    """

    weights: tuple
    means: tuple
    sds: tuple

    @classmethod
    def lognormal(cls, m, s2):
        if s2 <= 0:
            raise ModelError("LogNormal A-law needs s^2 > 0 (absolutely continuous)")
        return cls((1.0,), (float(m),), (math.sqrt(s2),))

    @classmethod
    def mixture(cls, weights, means, variances):
        w = np.asarray(weights, float)
        if len(w) == 0 or len(w) != len(means) or len(w) != len(variances):
            raise ModelError("mixture components must have matching lengths")
        if np.any(w <= 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ModelError("mixture weights must be positive and sum to 1")
        if any(v <= 0 for v in variances):
            raise ModelError("every mixture component needs positive variance")
        return cls(tuple(float(x) for x in w), tuple(float(x) for x in means),
                   tuple(math.sqrt(v) for v in variances))

    @property
    def mean_log(self) -> float:
        return math.fsum(p * m for p, m in zip(self.weights, self.means))

    @property
    def second_log_moment(self) -> float:
        return math.fsum(p * (m * m + s * s) for p, m, s in zip(self.weights, self.means, self.sds))

    def moment(self, p: float) -> float:
        """E[A^p] = sum_i w_i exp(p m_i + p^2 s_i^2 / 2)."""
        return math.fsum(w * math.exp(p * m + 0.5 * p * p * s * s)
                         for w, m, s in zip(self.weights, self.means, self.sds))

    def log_spread_bound(self) -> float:
        return max(abs(m) + _Z_SURE * s for m, s in zip(self.means, self.sds))

    def sample_log(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if len(self.weights) == 1:
            return self.means[0] + self.sds[0] * rng.standard_normal(size)
        comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        z = rng.standard_normal(size)
        return np.asarray(self.means)[comp] + np.asarray(self.sds)[comp] * z


@dataclass(frozen=True)
class ModelSpec:
    chain_kind: ChainKind
    a_law: LogLaw
    b_law: Optional[Law] = None
    c_law: Optional[Law] = None
    d_law: Optional[Law] = None
    delta: float = 0.5
    regime: Regime = Regime.CRITICAL

    def __post_init__(self):
        object.__setattr__(self, "chain_kind", ChainKind(self.chain_kind))
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.delta <= 0:
            raise ModelError("delta must be positive")
        kind = self.chain_kind
        if kind in (ChainKind.AFFINE, ChainKind.LETAC) and self.b_law is None:
            raise ModelError(f"{kind.name} chain needs a b_law")
        if kind == ChainKind.LETAC:
            if self.c_law is None:
                raise ModelError("LETAC chain needs a c_law")
            if self.c_law.family not in ("constant", "shifted_half_normal") or self.c_law.ess_inf() < 0:
                raise ModelError("c_law must be HalfNormal or a nonnegative Constant")
            if self.b_law.ess_inf() < self.delta:
                raise ModelError("LETAC requires B >= delta a.s.: use ShiftedHalfNormal(delta, s) "
                                 "or Constant(c) with c >= delta")
        if kind == ChainKind.EXTREMAL:
            if self.d_law is None:
                raise ModelError("EXTREMAL chain needs a d_law")
            if self.d_law.family not in ("lognormal", "shifted_half_normal") or (
                    self.d_law.family == "shifted_half_normal" and self.d_law.p1 <= 0):
                raise ModelError("d_law must be LogNormal or ShiftedHalfNormal with positive shift")
        if self.regime == Regime.CRITICAL and self.a_law.mean_log != 0.0:
            raise ModelError(f"critical regime needs E log A = 0 exactly, got {self.a_law.mean_log!r}")
        if self.regime == Regime.CONTRACTIVE and not self.a_law.mean_log < 0:
            raise ModelError("contractive regime needs E log A < 0")

    def inert_level(self) -> float:
        """Log-level above which B, C, D cannot change a double-precision state.

        Above it the step is exactly x -> A x; the margin e^-40 is far below
        half an ulp.
        """
        bound = 1.0
        for law in (self.b_law, self.c_law, self.d_law):
            if law is not None:
                bound = max(bound, law.abs_bound())
        return math.log(bound) + self.a_law.log_spread_bound() + 40.0

    def fingerprint(self) -> str:
        blob = json.dumps(model_to_dict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def model_to_dict(model: ModelSpec) -> dict:
    out = {
        "chain_kind": model.chain_kind.name.lower(),
        "regime": model.regime.value,
        "delta": model.delta,
        "a_law": {"weights": list(model.a_law.weights), "means": list(model.a_law.means),
                  "variances": [s * s for s in model.a_law.sds]},
    }
    for name in ("b_law", "c_law", "d_law"):
        law = getattr(model, name)
        if law is not None:
            out[name] = asdict(law)
    return out


@dataclass(frozen=True)
class ValidationReport:
    e_log_a: float
    sigma2: float
    moment_flags: dict = field(default_factory=dict)
    spread_out: bool = True
    degenerate_a: bool = False

    @property
    def ok(self) -> bool:
        return all(v["holds"] for v in self.moment_flags.values())

    def failures(self):
        return [k for k, v in self.moment_flags.items() if not v["holds"]]


def _flag(holds, method="analytic", value=None):
    out = {"holds": bool(holds), "method": method}
    if value is not None:
        out["value"] = value
    return out


def validate(model: ModelSpec) -> ValidationReport:
    """Check every assumption the downstream estimators rely on.

    All checks are closed-form; the function is pure.
    """
    a = model.a_law
    e_log_a = a.mean_log
    if model.regime == Regime.CRITICAL:
        e_log_a = 0.0
    sigma2 = a.second_log_moment
    degenerate = all(s == 0 for s in a.sds) and all(m == 0 for m in a.means)
    d = model.delta
    flags = {}
    if model.regime == Regime.CRITICAL:
        flags["E_log_A_zero"] = _flag(a.mean_log == 0.0, value=e_log_a)
    else:
        flags["E_log_A_negative"] = _flag(a.mean_log < 0, value=e_log_a)
    flags["A_not_one"] = _flag(not degenerate)
    # No a.s. fixed point: A is absolutely continuous, so P[Phi(x) = x] = 0.
    flags["no_fixed_point"] = _flag(not degenerate)
    flags["spread_out"] = _flag(True, method="structural")
    ea_pos, ea_neg = a.moment(d), a.moment(-d)
    flags["A_delta_moments"] = _flag(math.isfinite(ea_pos) and math.isfinite(ea_neg),
                                     value=(ea_pos, ea_neg))
    # mu-bar is the law of -log A, so its exponential moment is E[A^-gamma].
    flags["mu_bar_exp_moment"] = _flag(math.isfinite(a.moment(-d)), value=a.moment(-d))
    for name in ("b_law", "c_law", "d_law"):
        law = getattr(model, name)
        if law is not None:
            mom = law.abs_moment(d)
            flags[f"{name[0].upper()}_delta_moment"] = _flag(math.isfinite(mom), value=mom)
    if model.b_law is not None:
        # (|log A| + log+|B|)^{2+delta} is finite for every supported family.
        flags["log_moment_2_plus_delta"] = _flag(True)
    if model.chain_kind == ChainKind.LETAC:
        flags["B_geq_delta"] = _flag(model.b_law.ess_inf() >= d, method="structural",
                                     value=model.b_law.ess_inf())
    if model.chain_kind == ChainKind.EXTREMAL:
        flags["D_positive"] = _flag(True, method="structural")
    return ValidationReport(e_log_a=e_log_a, sigma2=sigma2, moment_flags=flags,
                            spread_out=True, degenerate_a=degenerate)


def sample_innovation(model: ModelSpec, rng: np.random.Generator, size: int = 1) -> dict:
    """Draw ``size`` i.i.d. innovations as a dict of arrays (a, b[, c] or a, d)."""
    out = {"a": np.exp(model.a_law.sample_log(rng, size))}
    if model.chain_kind in (ChainKind.AFFINE, ChainKind.LETAC):
        out["b"] = model.b_law.sample(rng, size)
    if model.chain_kind == ChainKind.LETAC:
        out["c"] = model.c_law.sample(rng, size)
    if model.chain_kind == ChainKind.EXTREMAL:
        out["d"] = model.d_law.sample(rng, size)
    return out


# Reference models used by the acceptance suite.
def m1() -> ModelSpec:
    """Critical affine: log A ~ N(0, 0.25), B ~ N(0, 1)."""
    return ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(0.0, 0.25), b_law=Law.normal(0.0, 1.0),
                     delta=1.0)


def m2() -> ModelSpec:
    """Critical Letac: log A ~ N(0, 0.25), B = 0.5 + |N(0,1)|, C = |N(0,1)|."""
    return ModelSpec(ChainKind.LETAC, LogLaw.lognormal(0.0, 0.25),
                     b_law=Law.shifted_half_normal(0.5, 1.0), c_law=Law.half_normal(1.0), delta=0.5)


def m3() -> ModelSpec:
    """Contractive affine: log A ~ N(-0.125, 0.25), B ~ N(0, 1)."""
    return ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(-0.125, 0.25), b_law=Law.normal(0.0, 1.0),
                     delta=1.0, regime=Regime.CONTRACTIVE)


REFERENCE_MODELS = {"M1": m1, "M2": m2, "M3": m3}
