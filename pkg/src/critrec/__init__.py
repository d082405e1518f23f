"""Simulation and estimation of invariant measures for critical random recursions.

Three recursions driven by i.i.d. innovations: affine X = A X + B, Letac
X = B + A max(C, X) and extremal X = max(A X, D), with E log A = 0.
"""
from .baseline import KestenBaselineReport, fit_tail_index, kesten_index
from .chains import ChainState, simulate, simulate_coupled_sandwich, step_affine, step_extremal, step_letac
from .config import ConfigError, RunConfig, load_config, parse_config
from .constants import (ConstantsReport, PsiGrid, c1_c2_from_psi, c_plus_formula_letac, c_sum_affine, d1_plus,
                        mu_bar_convolve, poisson_residual, psi_from_definition, smooth, plateau_moment_link)
from .ladder import LadderTracker, accumulate_cycles, burn_in_embedded, ladder_estimate
from .measure import (LogHistogram, TailProfile, estimate_ratio, fit_plateau, ratio_estimate, tail_profile)
from .model import ChainKind, Law, LogLaw, ModelError, ModelSpec, Regime, m1, m2, m3, sample_innovation, validate
from .rng import RandomStream

__version__ = "0.1.0"
