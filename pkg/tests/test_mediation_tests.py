import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from sklearn.base import clone

from qmed.estimands import EstimandQuery, qnie
from qmed.estimation import FitResult
from qmed.gsem import DagParams, GsemModel
from qmed.marginals import MarginalModel
from qmed.mediation_tests import (AbConfig, ALL_METHODS, BootstrapFailure, MediationTest, Method, TestResult,
                                  ab_from_bootstrap, ab_statistics, ab_test, classical_bootstrap_test,
                                  classical_from_bootstrap, gsem_bootstrap, joint_significance_tests,
                                  js_ym_from_paths, lambda_n, poc_bootstrap_test, pretest_stats, r_star,
                                  rank_p_value, resample_indices, run_tests, sobel_poc_test, sobel_z)
from qmed.simulation import SimScenario, sample_gsem

N01 = MarginalModel("normal", [0.0], 1.0)
EXP1 = MarginalModel("exponential", [0.0])
SPEC = ("normal", "normal", "exponential")


def as_fit(model):
    return FitResult(model=model, stage1_loglik=(0.0, 0.0, 0.0), stage2_loglik=0.0)


def scenario_data(alpha, beta, n=300, seed=1):
    sc = SimScenario(n=n).with_paths(alpha, beta)
    return sc, sample_gsem(sc, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def null_boot():
    sc, data = scenario_data(0.0, 0.0)
    return gsem_bootstrap(data, SPEC, sc.query, 200, (5,))


@pytest.mark.parametrize("n, printed", [(300, 6.0731), (500, 7.1957)])
def test_lambda_n_examples(n, printed):
    assert lambda_n(n, 2.0) == pytest.approx(2.0 * math.sqrt(n) / math.log(n), rel=1e-15)
    # Published four-digit figures carry a rounding slip in the fourth digit.
    assert lambda_n(n, 2.0) == pytest.approx(printed, rel=1e-4)


def test_lambda_n_at_e_squared():
    assert lambda_n(math.e ** 2, 2.0) == pytest.approx(math.e, abs=1e-12)


def test_pretest_statistic_examples():
    z = np.random.default_rng(0).normal(size=100)
    unit = (z - z.mean()) / z.std(ddof=1) / 20.0  # sd of sqrt(400) * draws is 1
    T_a, T_b, sa, sb = pretest_stats(DagParams(0.1, 0.0, 0.0), unit, unit, 400)
    assert sa == pytest.approx(1.0, abs=1e-12)
    assert T_a == pytest.approx(2.0, abs=1e-12)
    assert T_b == 0.0


def test_pretest_rejects_degenerate_spread():
    with pytest.raises(BootstrapFailure):
        pretest_stats(DagParams(0.1, 0.1, 0.0), np.ones(50), np.ones(50), 100)


def test_r_star_zero_cases():
    base = as_fit(GsemModel(N01, N01, EXP1, DagParams(0, 0, 0)))
    boot = as_fit(GsemModel(N01, N01, EXP1, DagParams(0.0, 0.3, 0.2)))
    q = EstimandQuery(0.5, 0.0, 1.0, (1.0,))
    assert r_star(boot, base, q, 100) == 0.0
    boot2 = as_fit(GsemModel(N01, N01, EXP1, DagParams(0.2, 0.3, 0.2)))
    assert r_star(boot2, base, EstimandQuery(0.5, 0.4, 0.4, (1.0,)), 100) == 0.0


def test_r_star_scalar_transcription():
    n = 100
    a = b = n ** -0.5
    base = as_fit(GsemModel(N01, N01, EXP1, DagParams(0, 0, 0)))
    boot = as_fit(GsemModel(N01, N01, EXP1, DagParams(a, b, 0.0)))
    q = EstimandQuery(0.5, 0.0, 1.0, (1.0,))
    # Straight-line evaluation: z1 = z2 = 1, q* = 0, Q_Y(1/2) = log 2, f_Y(log 2) = 1/2.
    delta = math.sqrt((a * b) ** 2 + b ** 2 + 1.0)
    eta = (1 / math.sqrt(2 * math.pi)) / 0.5
    expect = (1.0 - 0.0) * eta / delta
    for centered in (True, False):
        assert r_star(boot, base, q, n, centered_z=centered) == pytest.approx(expect, rel=1e-12)


def test_resample_indices_streams():
    a = resample_indices(50, 4, (3,))
    b = resample_indices(50, 6, (3,))
    np.testing.assert_array_equal(a, b[:4])
    assert a.min() >= 0 and a.max() < 50


@settings(max_examples=100, deadline=None)
@given(stat=st.floats(-3, 3), draws=st.lists(st.floats(-3, 3), min_size=1, max_size=40))
def test_rank_p_value_bounds(stat, draws):
    p = rank_p_value(stat, draws)
    assert 2 / (len(draws) + 1) - 1e-12 <= p <= 1.0


def test_decomposition_identity(null_boot):
    cfg = AbConfig(B=200)
    U, flags, diag = ab_statistics(null_boot, cfg)
    classical = null_boot.qnie - null_boot.qnie_hat
    assert 0.0 <= diag["flag_fraction"] <= 1.0
    assert np.all(U[~flags] == classical[~flags])
    assert flags.any()
    assert not np.any(U[flags] == classical[flags])


def test_degenerate_lambda_reduces_to_classical(null_boot):
    cfg = AbConfig(B=200, lambda_scale=0.0)
    U, flags, _ = ab_statistics(null_boot, cfg)
    assert not flags.any()
    ab, cl = ab_from_bootstrap(null_boot, cfg), classical_from_bootstrap(null_boot, cfg)
    assert (ab.p_value, ab.reject, ab.interval) == (cl.p_value, cl.reject, cl.interval)


def test_reject_iff_estimate_outside_interval(null_boot):
    for scale in (0.0, 1.0, 2.0):
        r = ab_from_bootstrap(null_boot, AbConfig(B=200, lambda_scale=scale))
        lo, hi = r.interval
        assert r.reject == (not lo < r.estimate < hi)
        assert 0 < r.p_value <= 1


def test_ab_test_deterministic_and_serializable():
    sc, data = scenario_data(0.3, 0.3, n=200, seed=2)
    cfg = AbConfig(B=100, seed=7)
    a, b = ab_test(data, SPEC, sc.query, cfg), ab_test(data, SPEC, sc.query, cfg)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict()["method"] == "qma-ab"
    c = classical_bootstrap_test(data, SPEC, sc.query, cfg)
    assert c.estimate == a.estimate


def test_strong_mediation_is_detected():
    sc, data = scenario_data(0.8, 0.8, n=300, seed=3)
    res = run_tests(data, SPEC, sc.query, AbConfig(B=200, seed=1))
    assert set(res) == set(ALL_METHODS)
    assert res[Method.QMA_AB].reject
    assert res[Method.QMA_AB].p_value < 0.05


def test_run_tests_shares_resamples_with_single_tests():
    sc, data = scenario_data(0.2, 0.0, n=150, seed=4)
    cfg = AbConfig(B=100, seed=9)
    joint = run_tests(data, SPEC, sc.query, cfg)
    assert joint[Method.QMA_AB].to_dict() == ab_test(data, SPEC, sc.query, cfg).to_dict()
    assert joint[Method.POC_B].to_dict() == poc_bootstrap_test(data, sc.query, cfg).to_dict()
    js_b, js_ym = joint_significance_tests(data, sc.query, cfg)
    assert joint[Method.JS_B].to_dict() == js_b.to_dict()
    assert joint[Method.JS_YM].to_dict() == js_ym.to_dict()
    assert joint[Method.POC_YM].to_dict() == sobel_poc_test(data, sc.query).to_dict()


def test_sobel_zero_path():
    assert sobel_z(0.0, 0.1, 0.5, 0.2) == 0.0
    assert 2 * stats.norm.sf(abs(sobel_z(0.0, 0.1, 0.5, 0.2))) == 1.0


def test_joint_significance_max_rule():
    # p_a = 0.01 and p_b = 0.20 through two-sided normal tests.
    za, zb = stats.norm.isf(0.005), stats.norm.isf(0.10)
    r = js_ym_from_paths(za, 1.0, zb, 1.0, 0.05)
    assert r.p_value == pytest.approx(0.20, abs=1e-12)
    assert not r.reject


def test_config_validation():
    with pytest.raises(ValueError):
        AbConfig(B=50)
    with pytest.raises(ValueError):
        AbConfig(lambda_scale=-1)
    with pytest.raises(ValueError):
        AbConfig(omega=1.5)


def test_too_many_failures_abort():
    sc, data = scenario_data(0.3, 0.3, n=100, seed=5)
    # Exposure far in the tail of S clamps in every replicate.
    q = EstimandQuery(0.5, 0.0, 40.0, sc.x)
    with pytest.raises(Exception):
        gsem_bootstrap(data, SPEC, q, 100, (0,))


def test_proposition_gradient():
    q = EstimandQuery(0.5, 0.0, 1.0, (1.0,))
    h = 1e-5

    def grad(a, b):
        f = lambda a_, b_: qnie(GsemModel(N01, N01, EXP1, DagParams(a_, b_, 0.5)), q)
        return ((f(a + h, b) - f(a - h, b)) / (2 * h), (f(a, b + h) - f(a, b - h)) / (2 * h))

    assert max(map(abs, grad(0.0, 0.0))) < 1e-8
    assert max(map(abs, grad(0.0, 0.5))) > 1e-3
    assert max(map(abs, grad(0.5, 0.0))) > 1e-3


def test_sklearn_wrapper():
    sc, data = scenario_data(0.4, 0.4, n=150, seed=6)
    est = MediationTest(method="poc-ym", family_y="exponential", x=sc.x)
    assert clone(est).get_params() == est.get_params()
    est.fit(data.X, data.y)
    assert isinstance(est.result_, TestResult)
    assert est.p_value_ == est.result_.p_value
