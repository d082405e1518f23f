import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from critrec import constants as C
from critrec.measure import LogHistogram, PlateauFit, TailProfile, ratio_estimate
from critrec.model import ChainKind, Law, LogLaw, ModelSpec, m1, m2
from critrec.rng import RandomStream

H = 1e-3
T = np.arange(0.0, 20.0 + H / 2, H)


# smoothing operator closed forms (g = 0 left of the grid start)

def test_smooth_constant():
    assert np.abs(C.smooth(np.ones_like(T), H) - (1 - np.exp(-T))).max() < 1e-6


def test_smooth_exponential():
    assert np.abs(C.smooth(np.exp(-T), H) - T * np.exp(-T)).max() < 1e-6


def test_smooth_step():
    # jump at the interior node t0 = 5 with the half value there; the trapezoid
    # increments on both sides of the node then cancel the jump error to O(h^3)
    t0 = 5.0
    g = np.where(T > t0 + H / 2, 1.0, np.where(T > t0 - H / 2, 0.5, 0.0))
    exact = np.where(T >= t0, 1 - np.exp(-(T - t0)), 0.0)
    err = np.abs(C.smooth(g, H) - exact)
    off = np.abs(T - t0) > H / 2
    assert err[off].max() < 1e-6
    assert err[~off].max() == pytest.approx(H / 4)


def test_smooth_step_from_grid_start():
    t = T[T >= 5.0 - 1e-12]
    assert np.abs(C.smooth(np.ones_like(t), H) - (1 - np.exp(-(t - t[0])))).max() < 1e-6


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_smooth_is_linear(a, b):
    x = np.linspace(0, 4, 401)
    f, g = np.sin(x), np.cos(3 * x)
    lhs = C.smooth(a * f + b * g, 0.01)
    rhs = a * C.smooth(f, 0.01) + b * C.smooth(g, 0.01)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_smooth_edge_bound():
    out, bound = C.smooth(np.full(5, 2.0), 0.5, return_edge_bound=True)
    assert bound[0] == 2.0 and bound[-1] == pytest.approx(2.0 * math.exp(-2.0))


def test_trapezoid():
    x = np.linspace(0, 1, 101)
    assert C.trapezoid(x, 0.01) == pytest.approx(0.5)


# convolution with the law of log A

def test_convolution_of_linear_and_quadratic():
    x = np.arange(-10, 10.01, 0.05)
    rng = RandomStream(1)
    lin = C.mu_bar_convolve(x, x, m1(), 20_000, rng)
    assert np.allclose(lin.values, lin.x, atol=5 * lin.stderr.max())
    quad = C.mu_bar_convolve(x ** 2, x, m1(), 20_000, rng, at=np.array([0.0, 2.0]))
    # E (x - log A)^2 = x^2 + 0.25; the grid interpolation adds step^2 / 6
    assert np.allclose(quad.values, [0.25, 4.25], atol=5 * quad.stderr.max() + 1e-3)


def test_convolution_needs_wide_grid():
    with pytest.raises(C.GridTooNarrowError):
        C.mu_bar_convolve(np.zeros(5), np.linspace(0, 0.5, 5), m1(), 10, 1)


def test_log_a_quantile():
    q = C.log_a_quantile(m1(), 1e-4)
    assert q == pytest.approx(0.5 * stats.norm.isf(5e-5))


# psi and its moments

def _cauchy_hist():
    h = LogHistogram()
    h.record_many(np.random.default_rng(0).standard_cauchy(50_000) * 5)
    return h.normalized()


def test_psi_vanishes_without_additive_term():
    # B = 0: the chain map and s -> a s have the same preimages
    model = ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(0.0, 0.25), b_law=Law.constant(0.0))
    psi = C.psi_from_definition(model, _cauchy_hist(), 1.0, math.e, np.arange(-2, 2, 0.5), 200, 1)
    assert np.all(psi.psi == 0.0)
    assert psi.method == "FromDefinition"


def test_psi_is_deterministic_per_seed():
    nu = _cauchy_hist()
    a = C.psi_from_definition(m1(), nu, 1.0, 2.0, [0.0, 1.0], 500, 7)
    b = C.psi_from_definition(m1(), nu, 1.0, 2.0, [0.0, 1.0], 500, 7)
    assert np.array_equal(a.psi, b.psi)
    assert "x,psi,stderr,method" in a.to_csv()


def _gauss_psi(shift=1.0):
    x = np.arange(-12, 16 + 1e-9, 1 / 16)
    p = stats.norm.pdf(x) - stats.norm.pdf(x - shift)
    return C.PsiGrid(1.0, math.e, x, p, np.full(x.size, 1e-4), "FromDefinition")


def test_first_moments_closed_form():
    # int psi = 0 and -int (x + 1) psi = shift
    mom = C.c1_c2_from_psi(_gauss_psi(1.0))
    assert mom.c1 == pytest.approx(0.0, abs=1e-12)
    assert mom.c2 == pytest.approx(1.0, abs=1e-10)
    assert mom.c1_stderr > 0


def test_first_moments_need_decay():
    g = _gauss_psi(1.0)
    g.psi = g.psi + 0.01
    with pytest.raises(C.GridTooNarrowError):
        C.c1_c2_from_psi(g)


def test_d1_structural_zero_for_letac():
    d = C.d1_plus(m2(), _cauchy_hist(), 100, 1)
    assert d.structural and d.d1_plus == 0.0 and d.stderr == 0.0


def test_d1_symmetric_affine_is_small():
    h = LogHistogram()
    h.record_many(np.random.default_rng(2).standard_cauchy(200_000))
    d = C.d1_plus(m1(), h.normalized(), 20_000, 3)
    assert abs(d.d1_plus) <= 4 * d.stderr
    assert d.positive_b_term < 0 < d.negative_b_term


def test_poisson_residual_exact_is_zero_for_residual_psi():
    x = np.arange(-8, 8.01, 0.0625)
    f = np.exp(-x ** 2)
    prof = TailProfile(1.0, 2.0, x, f, np.zeros_like(x), np.zeros_like(x))
    conv = C.mu_bar_convolve(f, x, m1(), 1000, 1)
    idx = np.searchsorted(x, conv.x)
    psi = C.PsiGrid(1.0, 2.0, conv.x, conv.values - f[idx], conv.stderr, "FromResidual")
    assert np.allclose(C.poisson_residual_exact(prof, psi, conv), 0.0, atol=1e-15)
    other = C.PsiGrid(1.0, 3.0, conv.x, psi.psi, psi.stderr, "FromDefinition")
    with pytest.raises(ValueError):
        C.poisson_residual(prof, other, m1(), 10, 1)


def _fit(level, slope, lse=0.1, sse=0.01):
    return PlateauFit(level, slope, lse, sse, (8, 12), 10.0, 65, 1.0)


def test_link_branches():
    sigma2 = 0.25
    lvl = C.plateau_moment_link(_fit(1.6, 0.0), C.FirstMoments(0.0, 0.2, 0.01, 0.02), sigma2)
    assert lvl.branch == "level" and lvl.predicted == pytest.approx(1.6)
    assert lvl.z == pytest.approx(0.0) and lvl.relative_gap == pytest.approx(0.0)
    slp = C.plateau_moment_link(_fit(1.0, 0.4), C.FirstMoments(0.05, 0.2, 0.001, 0.02), sigma2)
    assert slp.branch == "slope" and slp.predicted == pytest.approx(0.4)


def test_closed_constant_formulas_check_kind():
    est = ratio_estimate(m1(), 100_000, 1, functional=True)
    c = C.c_sum_affine(m1(), est)
    assert math.isfinite(c.value) and c.stderr > 0 and c.detail["sigma2"] == 0.25
    with pytest.raises(ValueError):
        C.c_sum_affine(m2(), est)
    with pytest.raises(ValueError):
        C.c_plus_formula_letac(m1(), None)


def test_report_text():
    rep = C.ConstantsReport(0.25, (0.0, 0.1), (0.2, 0.02), (0.0, 0.0), (1.6, 0.1), notes=["hello"],
                            normalization="nu(1, e] = 1", fingerprint="abc")
    text = rep.to_text()
    assert "c2 = 0.2 +- 0.02" in text and "# hello" in text
    assert "c_sum" not in text
