import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import beta as beta_dist

from smcmune import (
    ModelConfig,
    StimulusResponseSeries,
    ValidationError,
    cv_of_excitability,
    excitability_prior_logdensity,
    excitability_prob,
    excitability_slope_at_median,
    get_curve,
    model_prior,
    reorder_series,
)
from smcmune.model import BETA_SHAPE, ExcitabilityParams

from oracles import loglogistic_threshold_moments

LL = get_curve("loglogistic")
GAUSS = get_curve("gaussian")


# ---------------------------------------------------------------------------
# excitability curves


def test_loglogistic_closed_form_point():
    # shape k = 4*10/10 = 4, so F(20) = 1/(1 + (20/10)^-4) = 16/17
    p = excitability_prob(LL, 20.0, ExcitabilityParams(10.0, 10.0))
    assert p == pytest.approx(16.0 / 17.0, rel=1e-12)


def test_curves_half_at_median():
    for curve in (LL, GAUSS):
        for eta, lam in [(5.0, 1.0), (22.5, 3.0), (38.0, 9.5)]:
            assert excitability_prob(curve, eta, ExcitabilityParams(eta, lam)) == pytest.approx(
                0.5, abs=1e-14
            )


def test_loglogistic_zero_stimulus_is_zero():
    assert excitability_prob(LL, 0.0, ExcitabilityParams(10.0, 2.0)) == 0.0
    assert LL.log_prob(0.0, 10.0, 2.0) == -math.inf
    assert LL.log_one_minus(0.0, 10.0, 2.0) == 0.0


def test_gaussian_zero_stimulus_is_positive():
    # the Gaussian-CDF variant does not vanish at zero stimulus
    assert excitability_prob(GAUSS, 0.0, ExcitabilityParams(10.0, 8.0)) > 0.0


def test_slope_at_median_closed_form():
    assert excitability_slope_at_median(LL, ExcitabilityParams(10.0, 5.0)) == pytest.approx(0.2)
    assert excitability_slope_at_median(LL, ExcitabilityParams(25.0, 2.0)) == pytest.approx(0.5)
    assert excitability_slope_at_median(GAUSS, ExcitabilityParams(10.0, 4.0)) == pytest.approx(0.25)


@pytest.mark.parametrize("curve", [LL, GAUSS])
@pytest.mark.parametrize("eta,lam", [(8.0, 2.0), (22.5, 3.0), (35.0, 9.0)])
def test_slope_matches_finite_difference(curve, eta, lam):
    h = 1e-5 * eta
    fd = (curve.prob(eta + h, eta, lam) - curve.prob(eta - h, eta, lam)) / (2 * h)
    assert float(fd) == pytest.approx(1.0 / lam, rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    eta=st.floats(1.0, 45.0),
    lam=st.floats(0.2, 9.9),
    curve_name=st.sampled_from(["loglogistic", "gaussian"]),
)
def test_prob_monotone_in_stimulus(eta, lam, curve_name):
    curve = get_curve(curve_name)
    s_grid = np.linspace(0.01, 60.0, 120)
    vals = np.array([float(curve.prob(s, eta, lam)) for s in s_grid])
    assert (np.diff(vals) >= -1e-12).all()
    assert (vals >= 0.0).all() and (vals <= 1.0).all()


def test_log_prob_consistent_with_prob():
    etas = np.array([5.0, 20.0, 33.0])
    lams = np.array([1.0, 4.0, 9.0])
    for curve in (LL, GAUSS):
        for s in (3.0, 18.0, 41.0):
            np.testing.assert_allclose(
                np.exp(curve.log_prob(s, etas, lams)), curve.prob(s, etas, lams), rtol=1e-12
            )
            # the two log branches are complementary probabilities
            np.testing.assert_allclose(
                np.exp(curve.log_prob(s, etas, lams))
                + np.exp(curve.log_one_minus(s, etas, lams)),
                1.0,
                rtol=1e-12,
            )


def test_excitability_prob_rejects_bad_stimulus():
    p = ExcitabilityParams(10.0, 2.0)
    with pytest.raises(ValidationError):
        excitability_prob(LL, -1.0, p)
    with pytest.raises(ValidationError):
        excitability_prob(LL, math.inf, p)


def test_params_validation():
    with pytest.raises(ValidationError):
        ExcitabilityParams(0.0, 1.0)
    with pytest.raises(ValidationError):
        ExcitabilityParams(5.0, -1.0)
    with pytest.raises(ValidationError):
        ExcitabilityParams(math.nan, 1.0)


def test_get_curve_unknown():
    with pytest.raises(ValidationError):
        get_curve("probit")


# ---------------------------------------------------------------------------
# threshold coefficient of variation


def test_cv_at_published_ratio():
    # lam/eta = 3.64% corresponds to a threshold CV of about 1.65%
    cv = cv_of_excitability(ExcitabilityParams(100.0, 3.64))
    assert cv == pytest.approx(0.016508272894312427, rel=1e-12)
    assert abs(cv - 0.0165) < 1e-5


def test_cv_matches_numeric_moments():
    # independent route: quadrature of the threshold density's first two moments
    for eta, lam in [(22.5, 3.0), (10.0, 5.0), (30.0, 1.0)]:
        mean, var = loglogistic_threshold_moments(eta, lam)
        assert cv_of_excitability(ExcitabilityParams(eta, lam)) == pytest.approx(
            math.sqrt(var) / mean, rel=1e-6
        )


def test_cv_vanishes_with_slope():
    cvs = [cv_of_excitability(ExcitabilityParams(20.0, lam)) for lam in (2.0, 0.2, 0.02)]
    assert cvs[0] > cvs[1] > cvs[2]
    assert cvs[2] < 1e-3


def test_cv_undefined_for_steep_ratio():
    with pytest.raises(ValidationError):
        cv_of_excitability(ExcitabilityParams(1.0, 2.0))


# ---------------------------------------------------------------------------
# model-size prior


def test_model_prior_values():
    assert model_prior(1, 12) == pytest.approx(0.5001221001221001, rel=1e-14)
    assert model_prior(2, 2) == pytest.approx(1.0 / 3.0, rel=1e-14)


@pytest.mark.parametrize("u_max", [1, 2, 5, 12, 30])
def test_model_prior_normalized(u_max):
    total = sum(model_prior(u, u_max) for u in range(1, u_max + 1))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_model_prior_out_of_range():
    with pytest.raises(ValidationError):
        model_prior(0, 12)
    with pytest.raises(ValidationError):
        model_prior(13, 12)


# ---------------------------------------------------------------------------
# excitability prior density


def test_prior_logdensity_center_value():
    eta_max, lam_max = 33.0, 14.0
    got = excitability_prior_logdensity(eta_max / 2, lam_max / 2, eta_max, lam_max)
    want = (
        2.0 * beta_dist.logpdf(0.5, BETA_SHAPE, BETA_SHAPE)
        - math.log(eta_max)
        - math.log(lam_max)
    )
    assert got == pytest.approx(want, rel=1e-12)


def test_prior_logdensity_boundaries():
    assert excitability_prior_logdensity(0.0, 7.0, 33.0, 14.0) == -math.inf
    assert excitability_prior_logdensity(33.0, 7.0, 33.0, 14.0) == -math.inf
    assert excitability_prior_logdensity(40.0, 7.0, 33.0, 14.0) == -math.inf


def test_prior_logdensity_symmetry():
    for a in (0.1, 0.3, 0.45):
        lo = excitability_prior_logdensity(a * 33.0, 7.0, 33.0, 14.0)
        hi = excitability_prior_logdensity((1 - a) * 33.0, 7.0, 33.0, 14.0)
        assert lo == pytest.approx(hi, rel=1e-10)


def test_prior_logdensity_vectorized():
    etas = np.array([0.0, 16.5, 33.0])
    out = excitability_prior_logdensity(etas, 7.0, 33.0, 14.0)
    assert out.shape == (3,)
    assert out[0] == -math.inf and np.isfinite(out[1]) and out[2] == -math.inf


# ---------------------------------------------------------------------------
# series ordering and validation


def test_reorder_series_example():
    raw = [(0.0, 0.1), (40.0, 90.0), (10.0, 30.0), (0.0, -0.1), (20.0, 60.0)]
    base = [True, False, False, True, False]
    supra = [False, True, False, False, False]
    series = reorder_series(raw, base, supra)
    np.testing.assert_array_equal(series.stimuli, [0.0, 0.0, 40.0, 10.0, 20.0])
    np.testing.assert_array_equal(series.responses, [0.1, -0.1, 90.0, 30.0, 60.0])
    assert series.tau == 3
    assert series.supramax_stimulus == 40.0


def test_reorder_series_stable_ties():
    raw = [(0.0, 0.0), (40.0, 1.0), (10.0, 2.0), (10.0, 3.0)]
    series = reorder_series(raw, [1, 0, 0, 0], [0, 1, 0, 0])
    # equal stimuli keep their original relative order
    np.testing.assert_array_equal(series.post_responses, [2.0, 3.0])


def test_reorder_series_errors():
    with pytest.raises(ValidationError, match="no baseline"):
        reorder_series([(40.0, 1.0)], [False], [True])
    with pytest.raises(ValidationError, match="exactly one supramaximal"):
        reorder_series([(0.0, 0.0), (40.0, 1.0)], [1, 0], [0, 0])
    with pytest.raises(ValidationError, match="exactly one supramaximal"):
        reorder_series(
            [(0.0, 0.0), (40.0, 1.0), (40.0, 1.0)], [1, 0, 0], [0, 1, 1]
        )
    with pytest.raises(ValidationError, match="below series maximum"):
        reorder_series([(0.0, 0.0), (10.0, 1.0), (20.0, 2.0)], [1, 0, 0], [0, 1, 0])
    with pytest.raises(ValidationError, match="both baseline and supramaximal"):
        reorder_series([(0.0, 0.0), (40.0, 1.0)], [1, 1], [0, 1])
    with pytest.raises(ValidationError, match="non-zero stimulus"):
        reorder_series([(5.0, 0.0), (40.0, 1.0)], [1, 0], [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 6), st.integers(0, 8))
def test_reorder_series_random_permutations(rnd, n_base, n_post):
    records = [((0.0, rnd.uniform(-1, 1)), True, False) for _ in range(n_base)]
    records.append(((40.0, rnd.uniform(50, 150)), False, True))
    for _ in range(n_post):
        records.append(((rnd.uniform(1, 40), rnd.uniform(-1, 150)), False, False))
    rnd.shuffle(records)
    series = reorder_series(
        [r[0] for r in records], [r[1] for r in records], [r[2] for r in records]
    )
    series.validate()  # canonical-order invariants all hold
    assert series.n_baseline == n_base
    assert (np.diff(series.post_stimuli) >= 0).all()


def test_series_validation_errors():
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([0.0, 40.0, 20.0, 10.0]), np.zeros(4), tau=2)
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([0.0, 10.0, 20.0]), np.zeros(3), tau=2)
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([1.0, 40.0]), np.zeros(2), tau=2)
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([0.0, 40.0]), np.zeros(2), tau=5)
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([0.0, -4.0]), np.zeros(2), tau=2)
    with pytest.raises(ValidationError):
        StimulusResponseSeries(np.array([0.0, np.nan]), np.zeros(2), tau=2)


def test_series_accessors(tiny_series):
    assert tiny_series.T == 10
    assert tiny_series.n_baseline == 5
    assert tiny_series.supramax_stimulus == 30.0
    assert tiny_series.supramax_response == 59.8
    assert tiny_series.post_stimuli.size == 4
    np.testing.assert_array_equal(tiny_series.baseline_responses, [0.21, -0.16, 0.08, -0.05, 0.30])


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_and_eta_max(tiny_series):
    cfg = ModelConfig()
    assert cfg.resolve_eta_max(tiny_series) == pytest.approx(1.1 * 30.0)
    cfg2 = cfg.with_overrides(eta_max=50.0)
    assert cfg2.resolve_eta_max(tiny_series) == 50.0
    with pytest.raises(ValidationError):
        cfg.with_overrides(eta_max=30.0).resolve_eta_max(tiny_series)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(u_max=0)
    with pytest.raises(ValidationError):
        ModelConfig(delta=0.0)
    with pytest.raises(ValidationError):
        ModelConfig(epsilon=1.0)
    with pytest.raises(ValidationError):
        ModelConfig(prune_threshold=1.0)
    with pytest.raises(ValidationError):
        ModelConfig(grid_n0=1)
    with pytest.raises(ValidationError):
        ModelConfig(lambda_max=0.0)
    with pytest.raises(ValidationError):
        ModelConfig(curve="weibull")
