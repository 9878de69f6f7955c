import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from conftest import obs
from fleetlife.data import LifetimeObservation
from fleetlife.likelihood import (
    DegenerateFitError,
    FitError,
    FitResult,
    LTRCProblem,
    ModelSpec,
    fit_mle,
    log_scale_interval,
    loglikelihood,
    lr_statistic,
    lr_test,
    wald_intervals,
)
from fleetlife.simulation import fleet_observations, force_untruncated, generate_fleet, mle_scenario

WEIB = ModelSpec.per_stratum("weibull", ["G"])
LOGN = ModelSpec.per_stratum("lognormal", ["G"])
EXP2 = np.array([math.log(2.0), 0.0])  # Weibull eta=2, beta=1


def scale(o, c):
    return LifetimeObservation(o.serial, o.age * c, o.delta, o.nu, None if o.tau_L is None else o.tau_L * c,
                               o.covariates, o.group, predict_group=o.predict_group)


@pytest.fixture(scope="module")
def mle_obs():
    return fleet_observations(generate_fleet(mle_scenario()))


# -- likelihood values ----------------------------------------------------------

def test_single_failure_is_exponential_log_density():
    assert loglikelihood(WEIB, EXP2, [obs(2.0)]) == pytest.approx(math.log(0.5) - 1.0, abs=1e-14)


def test_single_truncated_censored_is_survival_ratio():
    assert loglikelihood(WEIB, EXP2, [obs(3.0, delta=0, tau=1.0)]) == pytest.approx(-1.0, abs=1e-14)


@pytest.mark.parametrize("delta", [0, 1])
def test_zero_truncation_age_matches_untruncated(delta):
    a = loglikelihood(WEIB, EXP2, [obs(2.5, delta=delta, tau=0.0)])
    b = loglikelihood(WEIB, EXP2, [obs(2.5, delta=delta)])
    assert a == b


def test_failure_at_age_zero_rejected():
    with pytest.raises(ValueError, match="age"):
        loglikelihood(WEIB, EXP2, [obs(0.0)])


def test_truncation_at_or_after_age_rejected():
    with pytest.raises(ValueError):
        obs(2.0, tau=2.0)


def test_stray_stratum_rejected():
    with pytest.raises(ValueError, match="outside"):
        loglikelihood(WEIB, EXP2, [obs(2.0, group="H")])


def test_weights_must_be_positive():
    with pytest.raises(ValueError, match="positive"):
        loglikelihood(WEIB, EXP2, [obs(2.0), obs(3.0)], weights=[1.0, 0.0])


def test_weight_neutrality_bit_for_bit(mle_obs):
    theta = np.array([math.log(90.0), math.log(0.6)])
    assert loglikelihood(WEIB, theta, mle_obs, weights=np.ones(len(mle_obs))) == loglikelihood(WEIB, theta, mle_obs)


def test_factorization_over_strata(mle_obs):
    half = len(mle_obs) // 2
    a = [o.__class__(**{**o.__dict__, "group": "A"}) for o in mle_obs[:half]]
    b = [o.__class__(**{**o.__dict__, "group": "B"}) for o in mle_obs[half:]]
    both = ModelSpec.per_stratum("weibull", ["A", "B"])
    theta = np.array([4.5, 4.7, -0.6, -0.8])
    joint = loglikelihood(both, theta, a + b)
    sa = loglikelihood(ModelSpec.per_stratum("weibull", ["A"]), theta[[0, 2]], a)
    sb = loglikelihood(ModelSpec.per_stratum("weibull", ["B"]), theta[[1, 3]], b)
    assert joint == pytest.approx(sa + sb, rel=1e-13)


@st.composite
def ltrc_samples(draw):
    n = draw(st.integers(2, 12))
    out = []
    for i in range(n):
        age = draw(st.floats(0.1, 50.0))
        tau = draw(st.one_of(st.none(), st.floats(0.0, 0.95)))
        out.append(obs(age, delta=draw(st.integers(0, 1)), tau=None if tau is None else tau * age, serial=f"s{i}"))
    return out


@settings(max_examples=80, deadline=None)
@given(ltrc_samples(), st.sampled_from(["weibull", "lognormal"]), st.floats(-1, 4), st.floats(-1.5, 1.0))
def test_weighted_sum_of_contributions(sample, family, mu, log_sigma):
    spec = ModelSpec.per_stratum(family, ["G"])
    theta = np.array([mu, log_sigma])
    w = np.linspace(0.5, 2.0, len(sample))
    parts = [loglikelihood(spec, theta, [o]) for o in sample]
    assert loglikelihood(spec, theta, sample, weights=w) == pytest.approx(float(w @ parts), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(ltrc_samples(), st.sampled_from(["weibull", "lognormal"]), st.floats(-1, 4), st.floats(-1.5, 1.0))
def test_analytic_gradient_and_hessian(sample, family, mu, log_sigma):
    problem = LTRCProblem(ModelSpec.per_stratum(family, ["G"]), sample)
    theta = np.array([mu, log_sigma])
    num = optimize.approx_fprime(theta, problem.loglik, 1e-7)
    g = problem.gradient(theta)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-4 * (1 + np.abs(g).max()))
    assert np.allclose(problem.hessian(theta), problem.fd_hessian(theta), rtol=1e-4, atol=1e-5 * len(sample))


# -- fitting ------------------------------------------------------------------

def test_lognormal_closed_form_mle():
    t = np.exp(np.random.default_rng(3).normal(1.2, 0.7, size=200))
    sample = [obs(x, serial=f"s{i}") for i, x in enumerate(t)]
    fit = fit_mle(LOGN, sample)
    assert fit.converged
    assert fit.theta[0] == pytest.approx(np.mean(np.log(t)), abs=1e-7)
    assert math.exp(fit.theta[1]) == pytest.approx(np.std(np.log(t)), abs=1e-7)


def test_recovers_truth_within_three_se(mle_obs):
    fit = fit_mle(WEIB, mle_obs)
    truth = mle_scenario().true_theta()
    assert fit.converged
    assert np.all(np.abs(fit.theta - truth) <= 3 * fit.standard_errors)


def test_fixed_point_and_determinism(mle_obs):
    fit = fit_mle(WEIB, mle_obs)
    again = fit_mle(WEIB, mle_obs, init=fit.estimate)
    assert np.allclose(again.theta, fit.theta, rtol=0, atol=1e-9)
    assert np.array_equal(fit_mle(WEIB, mle_obs).theta, fit.theta)


def test_loglik_not_below_init(mle_obs):
    init = np.array([math.log(60.0), math.log(1.0)])
    fit = fit_mle(WEIB, mle_obs, init=init)
    assert fit.loglik >= loglikelihood(WEIB, init, mle_obs)


def test_gradient_small_at_estimate(mle_obs):
    fit = fit_mle(WEIB, mle_obs)
    assert fit.gradient_norm < 1e-5
    cov = fit.covariance
    assert np.allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_scale_invariance(mle_obs):
    c = 12.0
    spec = ModelSpec.per_stratum("weibull", ["A", "B"])
    half = len(mle_obs) // 2
    data = [o.__class__(**{**o.__dict__, "group": "A" if i < half else "B"}) for i, o in enumerate(mle_obs)]
    shared = ModelSpec("weibull", ("A", "B"), shape_classes={"all": ("A", "B")})
    full, red = fit_mle(spec, data), fit_mle(shared, data)
    scaled = [scale(o, c) for o in data]
    full_c, red_c = fit_mle(spec, scaled), fit_mle(shared, scaled)
    assert np.allclose(full_c.theta[:2] - full.theta[:2], math.log(c), atol=1e-6)
    assert np.allclose(full_c.theta[2:], full.theta[2:], atol=1e-6)
    assert lr_test(full_c, red_c).statistic == pytest.approx(lr_test(full, red).statistic, abs=1e-6)


def test_naive_fit_below_truncation_aware_fit(mle_obs):
    assert np.mean([o.nu == 0 for o in mle_obs]) > 0.5
    aware = fit_mle(WEIB, mle_obs)
    naive = fit_mle(WEIB, force_untruncated(mle_obs))
    assert naive.theta[0] < aware.theta[0]


def test_zero_failure_stratum_is_named():
    data = [obs(5.0, serial="a"), obs(6.0, serial="b"), obs(4.0, delta=0, group="H", serial="c")]
    spec = ModelSpec("weibull", ("G", "H"), shape_classes={"all": ("G", "H")})
    with pytest.raises(DegenerateFitError, match="'H'"):
        fit_mle(spec, data)


def test_zero_failure_shape_class():
    with pytest.raises(DegenerateFitError, match="shape class"):
        fit_mle(WEIB, [obs(5.0, delta=0, serial="a"), obs(6.0, delta=0, serial="b")])


def test_heavy_truncation_diagnostic():
    rng = np.random.default_rng(4)
    t = 5 + rng.weibull(2.0, size=200) * 20
    sample = [obs(x, tau=4.0, serial=f"s{i}") for i, x in enumerate(t)]
    fit = fit_mle(WEIB, sample)
    assert any("heavy truncation" in d for d in fit.diagnostics)


def test_treatment_baseline_is_most_frequent_level():
    rng = np.random.default_rng(5)
    data = [obs(float(rng.weibull(2) * 10 + 0.1), serial=f"s{i}", insulation="d65" if i < 30 else "d55")
            for i in range(40)]
    fit = fit_mle(ModelSpec("weibull", ("G",), {"G": ("insulation",)}), data)
    (tc,) = fit.coding["G"]
    assert tc.baseline == "d65" and tc.levels == ("d55",)
    assert fit.names == ["G:(Intercept)", "G:insulation[d55]", "log_sigma:G"]
    ivs = wald_intervals(fit)
    assert "eta[G|insulation=d65]" in ivs and "eta[G|insulation=d55]" in ivs


def test_fit_result_round_trip(mle_obs):
    fit = fit_mle(WEIB, mle_obs)
    back = FitResult.from_dict(fit.as_dict())
    assert np.array_equal(back.theta, fit.theta)
    assert np.array_equal(back.covariance, fit.covariance)
    assert back.spec == fit.spec
    report = fit.report()
    assert report["intervals"]["beta[G]"]["lower"] < 2.0 < report["intervals"]["beta[G]"]["upper"]


# -- intervals and LR tests -------------------------------------------------

def test_log_scale_wald_reference_interval():
    lo, hi = log_scale_interval(127.22, 25.112, 0.95)
    assert lo == pytest.approx(86.401, rel=0.02)
    assert hi == pytest.approx(187.317, rel=0.02)
    # exp(log 127.22 +- 1.959964 * 25.112 / 127.22)
    assert (lo, hi) == pytest.approx((86.40451223536567, 187.31577762874578), rel=1e-12)


def test_zero_variance_gives_point_interval():
    assert log_scale_interval(5.0, 0.0) == (5.0, 5.0)


def test_singular_covariance_rejected(mle_obs):
    fit = fit_mle(WEIB, mle_obs, compute_covariance=False)
    with pytest.raises(FitError, match="singular"):
        wald_intervals(fit)


@pytest.mark.parametrize("full, reduced, expected", [(-100.268, -103.663, 6.790), (-20.138, -25.268, 10.260)])
def test_lr_statistic_arithmetic(full, reduced, expected):
    assert lr_statistic(full, reduced, 1).statistic == pytest.approx(expected, abs=1e-9)


def test_identical_fits_lr_zero(mle_obs):
    fit = fit_mle(WEIB, mle_obs)
    res = lr_test(fit, fit)
    assert (res.statistic, res.df, res.p_value) == (0.0, 0, 1.0)


def test_negative_lr_statistic_rejected():
    with pytest.raises(FitError, match="negative"):
        lr_statistic(-110.0, -100.0, 1)


def test_non_nested_rejected(mle_obs):
    a = fit_mle(WEIB, mle_obs)
    b = fit_mle(LOGN, mle_obs)
    with pytest.raises(ValueError, match="nested"):
        lr_test(a, b)
