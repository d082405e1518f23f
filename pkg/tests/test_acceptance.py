"""Acceptance suite on the three reference models.

Long runs (about a quarter of an hour on one core) are shared through
module fixtures.  Every test reports one pass/fail line, collected in the
terminal summary.  Seeds are fixed once and never tuned.
"""
import filecmp
import itertools
import math
import os

import numpy as np
import pytest

from critrec import constants as C
from critrec.baseline import kesten_baseline
from critrec.chains import simulate_coupled_sandwich
from critrec.cli import main
from critrec.config import grid
from critrec.ladder import ladder_estimate
from critrec.measure import fit_plateau, moment_stabilization, ratio_estimate, tail_profile
from critrec.model import m1, m2, m3
from critrec.rng import RandomStream

SEED = 20261016
X_GRID = grid((0.0, 16.0, 0.0625))
PSI_GRID = grid((-12.0, 16.0, 0.0625))
WINDOW = (8.0, 12.0)
PAIRS = [(1.0, 2.0), (1.0, 4.0), (2.0, 8.0)]
REF_PAIR = (1.0, math.e)
MC_DRAWS = 5000
SIGMA2 = 0.25

pytestmark = pytest.mark.acceptance


# shared long runs

@pytest.fixture(scope="module")
def m1_ratio():
    # 1e9 steps over 16 replicas; the functional feeds the closed constant
    return ratio_estimate(m1(), 10 ** 9, SEED, replicas=16, functional=True)


@pytest.fixture(scope="module")
def m1_psi(m1_ratio):
    return C.psi_from_definition(m1(), m1_ratio.hist, *REF_PAIR, PSI_GRID, MC_DRAWS, RandomStream(SEED, 0, 11))


@pytest.fixture(scope="module")
def m2_ladder():
    # 1e7 cycles over 8 replicas, cap 1e6 (excluded fraction ~6e-4)
    res = ladder_estimate(m2(), 10 ** 7, SEED, replicas=8, cap=10 ** 6, functional=True)
    assert res.excluded_fraction < 1e-3
    return res


@pytest.fixture(scope="module")
def m2_psi(m2_ladder):
    return C.psi_from_definition(m2(), m2_ladder.normalized_hist, *REF_PAIR, PSI_GRID, MC_DRAWS,
                                 RandomStream(SEED, 0, 21))


def _fits(hist):
    return [fit_plateau(tail_profile(hist, a, b, X_GRID), WINDOW) for a, b in PAIRS]


# criteria

def test_tail_scaling_across_pairs(m1_ratio, acceptance):
    c = [f.c_plateau for f in _fits(m1_ratio.hist)]
    worst = max(abs(x / y - 1) for x, y in itertools.permutations(c, 2))
    ok = worst <= 0.15
    acceptance("tail scaling", ok, "level/log(beta/alpha) = " + ", ".join(f"{v:.4f}" for v in c)
               + f"; worst pairwise relative gap {worst:.3f} (<= 0.15)")
    assert ok


def test_plateau_flatness(m1_ratio, acceptance):
    width = WINDOW[1] - WINDOW[0]
    parts, ok = [], True
    for (a, b), f in zip(PAIRS, _fits(m1_ratio.hist)):
        good = abs(f.slope) <= 2 * f.slope_stderr and abs(f.slope) * width <= 0.2 * f.level
        ok &= good
        parts.append(f"({a:g},{b:g}) slope {f.slope:+.4f} +- {f.slope_stderr:.4f}, "
                     f"|slope|*width/level {abs(f.slope) * width / f.level:.3f}")
    acceptance("plateau flatness", ok, "; ".join(parts))
    assert ok


def test_vanishing_first_moment(m1_ratio, m1_psi, m2_ladder, m2_psi, acceptance):
    rows, ok = [], True
    for name, model, hist, psi in (("M1", m1(), m1_ratio.hist, m1_psi),
                                   ("M2", m2(), m2_ladder.normalized_hist, m2_psi)):
        mom = C.c1_c2_from_psi(psi)
        d1 = C.d1_plus(model, hist, 200_000, RandomStream(SEED, 0, 12))
        good = abs(mom.c1) <= 3 * mom.c1_stderr and abs(d1.d1_plus) <= 3 * d1.stderr
        ok &= good
        rows.append(f"{name} c1 {mom.c1:+.4f} +- {mom.c1_stderr:.4f}, d1 {d1.d1_plus:+.4f} +- {d1.stderr:.4f}"
                    + (" (structural)" if d1.structural else ""))
    acceptance("vanishing first moment", ok, "; ".join(rows))
    assert ok


def test_plateau_matches_second_moment(m1_ratio, m1_psi, acceptance):
    fit = fit_plateau(tail_profile(m1_ratio.hist, *REF_PAIR, X_GRID), WINDOW)
    mom = C.c1_c2_from_psi(m1_psi)
    link = C.plateau_moment_link(fit, mom, SIGMA2)
    ok = link.branch == "level" and link.relative_gap <= 0.2
    acceptance("plateau vs 2 c2 / sigma^2", ok,
               f"plateau {fit.level:.4f} +- {fit.level_stderr:.4f}, predicted {link.predicted:.4f} "
               f"+- {link.predicted_stderr:.4f}, gap {link.relative_gap:.3f} (<= 0.2)")
    assert ok


def test_letac_constant_cross_check(m2_ladder, acceptance):
    fit = fit_plateau(tail_profile(m2_ladder.normalized_hist, *REF_PAIR, X_GRID), WINDOW)
    form = C.c_plus_formula_letac(m2(), m2_ladder)
    gap = abs(fit.c_plateau / form.value - 1)
    ok = (gap <= 0.2 and fit.c_plateau > 3 * fit.c_plateau_stderr and form.value > 3 * form.stderr)
    acceptance("Letac constant", ok,
               f"plateau {fit.c_plateau:.3f} +- {fit.c_plateau_stderr:.3f}, formula {form.value:.3f} "
               f"+- {form.stderr:.3f}, gap {gap:.3f} (<= 0.2), cycles {m2_ladder.n_cycles}")
    assert ok


def test_poisson_residual(m1_ratio, m1_psi, acceptance):
    prof = tail_profile(m1_ratio.hist, *REF_PAIR, PSI_GRID)
    res = C.poisson_residual(prof, m1_psi, m1(), MC_DRAWS, RandomStream(SEED, 0, 13), window=WINDOW)
    z = res.z
    ok = res.x.size > 0 and bool(np.all(z <= 3))
    acceptance("Poisson residual", ok, f"{res.x.size} interior points, max |r|/se {z.max():.2f} (<= 3), "
               f"sup |r| {res.sup_residual:.4f}")
    assert ok


def test_sandwich_and_support(acceptance):
    bad = support = 0
    for s in range(16):
        r = simulate_coupled_sandwich(m2(), None, 10 ** 6, RandomStream(SEED, s, 31), store=False)
        assert not r.aborted
        bad += r.violations
        support += r.support_violations
    ok = bad == 0 and support == 0
    acceptance("sandwich and support", ok, f"16 seeds x 1e6 steps: {bad} ordering, {support} support violations")
    assert ok


def test_smoothing_closed_forms(acceptance):
    h = 1e-3
    t = np.arange(0.0, 20.0 + h / 2, h)
    # unit step at the interior node t0 = 5, valued 1/2 there; errors measured off the jump node
    t0 = 5.0
    step = np.where(t > t0 + h / 2, 1.0, np.where(t > t0 - h / 2, 0.5, 0.0))
    off = np.abs(t - t0) > h / 2
    errs = {
        "constant": np.abs(C.smooth(np.ones_like(t), h) - (1 - np.exp(-t))).max(),
        "exponential": np.abs(C.smooth(np.exp(-t), h) - t * np.exp(-t)).max(),
        "step": np.abs(C.smooth(step, h) - np.where(t >= t0, 1 - np.exp(-(t - t0)), 0.0))[off].max(),
    }
    ok = max(errs.values()) < 1e-6
    acceptance("smoothing operator", ok, ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + " (< 1e-6)")
    assert ok


def test_kesten_baseline(acceptance):
    rep = kesten_baseline(m3(), 10 ** 8, SEED, replicas=8)
    ok = rep.relative_error <= 0.07
    acceptance("Kesten baseline", ok, f"alpha fitted {rep.alpha_star_fitted:.4f} +- {rep.stderr:.4f} vs "
               f"{rep.alpha_star_analytic}, relative error {rep.relative_error:.3f} (<= 0.07)")
    assert ok


def test_estimator_cross_consistency(acceptance):
    # embedded-start ratio runs vs a high-cap ladder run, same normalization
    ratio = ratio_estimate(m2(), 512 * 4 * 10 ** 6, SEED + 1, replicas=512, x0="embedded")
    ladder = ladder_estimate(m2(), 5 * 10 ** 5, SEED + 2, replicas=8, cap=10 ** 8, functional=False)
    hr, hl = ratio.hist, ladder.normalized_hist
    hits = np.minimum(hr.counts, ladder.hist.counts)
    keep = hits >= 1e4
    keep[[0, hr.nb + 1, hr.weights.size - 1]] = False     # overflow and near-zero cells
    dev = np.abs(hl.weights[keep] / hr.weights[keep] - 1)
    ok = keep.sum() > 0 and dev.max() <= 0.10
    acceptance("estimator cross-consistency", ok,
               f"{int(keep.sum())} bins with >= 1e4 hits, max deviation {dev.max():.3f} (<= 0.10), "
               f"ladder excluded {ladder.excluded_fraction:.1e}")
    assert ok


def test_moment_stabilization(m1_ratio, m2_ladder, acceptance):
    rows, ok = [], True
    for name, hist in (("M1", m1_ratio.hist), ("M2", m2_ladder.normalized_hist)):
        a, b, rel = moment_stabilization(hist, 0.5, math.exp(10))
        ok &= rel < 0.05
        rows.append(f"{name} {a:.3f} -> {b:.3f} ({rel:.4f})")
    acceptance("moment stabilization", ok, "; ".join(rows) + " (< 0.05)")
    assert ok


CLI_CONFIGS = {
    "m1.yaml": """\
model: M1
run: {seed: 7, replicas: 4, n_steps: 2000000, workers: 2}
tail: {window: [2, 4]}
constants: {mc_draws: 500}
""",
    "m2.yaml": """\
model: M2
run: {seed: 7, replicas: 2, n_cycles: 5000, estimator: both, n_steps: 2000000, cap: 1000000, workers: 2}
tail: {window: [2, 4]}
constants: {mc_draws: 500}
""",
    "m3.yaml": """\
model: M3
run: {seed: 7, replicas: 4, n_steps: 4000000, workers: 2}
baseline: {window: [3, 100]}
""",
}
CLI_RUNS = [("validate", "m1.yaml"), ("simulate", "m1.yaml"), ("tail", "m1.yaml"), ("constants", "m1.yaml"),
            ("poisson-check", "m1.yaml"), ("simulate", "m2.yaml"), ("tail", "m2.yaml"), ("constants", "m2.yaml"),
            ("poisson-check", "m2.yaml"), ("kesten-baseline", "m3.yaml")]


def test_cli_determinism(tmp_path, acceptance):
    for name, text in CLI_CONFIGS.items():
        (tmp_path / name).write_text(text)
    mismatched, checked = [], 0
    for sub, cfg in CLI_RUNS:
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / rep / f"{sub}-{cfg}"
            assert main([sub, "--config", str(tmp_path / cfg), "--out", str(out)]) == 0
            outs.append(out)
        names = sorted(os.listdir(outs[0]))
        assert names == sorted(os.listdir(outs[1]))
        for n in names:
            checked += 1
            if not filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False):
                mismatched.append(f"{sub}/{n}")
    ok = not mismatched
    acceptance("CLI determinism", ok, f"{checked} artifacts from {len(CLI_RUNS)} runs compared byte-for-byte, "
               f"{len(mismatched)} differ" + (f": {', '.join(mismatched)}" if mismatched else ""))
    assert ok
