import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from critrec.model import (ChainKind, Law, LogLaw, ModelError, ModelSpec, Regime, m1, m2, m3, model_to_dict,
                           sample_innovation, validate)


def test_m1_validation_closed_forms():
    rep = validate(m1())
    assert rep.sigma2 == 0.25
    assert rep.e_log_a == 0.0
    assert rep.ok and not rep.failures()


@pytest.mark.parametrize("factory", [m1, m2, m3])
def test_reference_models_pass_validation(factory):
    assert validate(factory()).ok


def test_critical_regime_requires_centered_log_a():
    with pytest.raises(ModelError):
        ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(0.1, 0.25), b_law=Law.normal(0, 1))


def test_contractive_regime_requires_negative_drift():
    with pytest.raises(ModelError):
        ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(0.0, 0.25), b_law=Law.normal(0, 1),
                  regime=Regime.CONTRACTIVE)


def test_letac_requires_b_above_delta():
    with pytest.raises(ModelError):
        ModelSpec(ChainKind.LETAC, LogLaw.lognormal(0.0, 0.25), b_law=Law.normal(0, 1),
                  c_law=Law.half_normal(1.0), delta=0.5)
    with pytest.raises(ModelError):
        ModelSpec(ChainKind.LETAC, LogLaw.lognormal(0.0, 0.25), b_law=Law.shifted_half_normal(0.2, 1.0),
                  c_law=Law.half_normal(1.0), delta=0.5)


def test_degenerate_a_law_rejected():
    with pytest.raises(ModelError):
        LogLaw.lognormal(0.0, 0.0)


def test_mixture_weights_checked():
    with pytest.raises(ModelError):
        LogLaw.mixture([0.5, 0.6], [0.0, 0.0], [1.0, 1.0])
    law = LogLaw.mixture([0.5, 0.5], [0.2, -0.2], [0.1, 0.1])
    assert law.mean_log == 0.0
    assert law.second_log_moment == pytest.approx(0.1 + 0.04)


def test_extremal_needs_positive_d():
    with pytest.raises(ModelError):
        ModelSpec(ChainKind.EXTREMAL, LogLaw.lognormal(0.0, 0.25), d_law=Law.normal(1.0, 1.0))
    ModelSpec(ChainKind.EXTREMAL, LogLaw.lognormal(0.0, 0.25), d_law=Law.lognormal(0.0, 1.0))


def test_lognormal_moment_closed_form():
    law = LogLaw.lognormal(-0.125, 0.25)
    assert law.moment(1.0) == pytest.approx(1.0, abs=1e-15)
    assert law.moment(2.0) == pytest.approx(math.exp(-0.25 + 0.5))


def test_half_normal_moment_matches_closed_form():
    # E|Z|^p = 2^(p/2) Gamma((p+1)/2) / sqrt(pi)
    for p in (0.5, 1.0, 2.0):
        exact = 2 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)
        assert Law.half_normal(1.0).abs_moment(p) == pytest.approx(exact, rel=1e-7)


def test_sample_innovation_keys_and_support():
    g = np.random.default_rng(0)
    inn = sample_innovation(m2(), g, 10_000)
    assert set(inn) == {"a", "b", "c"}
    assert inn["b"].min() >= 0.5 and inn["c"].min() >= 0.0 and inn["a"].min() > 0
    assert set(sample_innovation(m1(), g, 3)) == {"a", "b"}
    ext = ModelSpec(ChainKind.EXTREMAL, LogLaw.lognormal(0.0, 0.25), d_law=Law.lognormal(0.0, 1.0))
    assert set(sample_innovation(ext, g, 3)) == {"a", "d"}


def test_fingerprint_depends_on_model_only():
    assert m1().fingerprint() == m1().fingerprint()
    assert m1().fingerprint() != m3().fingerprint()
    assert model_to_dict(m2())["chain_kind"] == "letac"


@given(st.floats(0.01, 4.0), st.floats(0.0, 10.0))
def test_inert_level_exceeds_every_practical_innovation(s2, b):
    model = ModelSpec(ChainKind.AFFINE, LogLaw.lognormal(0.0, s2), b_law=Law.normal(b, 1.0))
    y = model.inert_level()
    # above e^y, |B| / |A x| < e^-40 for all but a 1e-32 event
    assert y >= math.log(abs(b) + 12.0) + 12.0 * math.sqrt(s2) + 40.0 - 1e-9
