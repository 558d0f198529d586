import math

import numpy as np
import pytest
from sklearn.base import clone

from qmed._validation import Dataset
from qmed.estimation import GsemMediation, fit, fit_dag, fit_dag_scatter, stage2_objective
from qmed.glm import GLMMarginal, RankDeficientError, fit_marginal
from qmed.gsem import DagParams, GsemModel
from qmed.marginals import MarginalModel

SPEC = ("normal", "normal", "exponential")


def design(n, rng):
    return np.column_stack([np.ones(n), rng.normal(0, 0.3, n)])


def simulate(dag, n, seed, fam_y="exponential"):
    rng = np.random.default_rng(seed)
    X = design(n, rng)
    m = GsemModel(MarginalModel("normal", [0.2, 0.5], 0.5), MarginalModel("normal", [-0.1, 0.3], 1.0),
                  MarginalModel(fam_y, [0.1, 0.4], 0.5), dag)
    return m, m.sample(X, rng)


def test_normal_intercept_only_closed_form(rng):
    y = rng.normal(3, 2, 200)
    data = Dataset(y, y, y, np.ones((200, 1)))
    m = fit_marginal(data, "S", "normal")
    assert m.zeta[0] == pytest.approx(y.mean(), abs=1e-12)
    assert m.phi == pytest.approx(y.var(), rel=1e-12)


def test_exponential_intercept_only_rate(rng):
    y = rng.exponential(2.5, 300)
    data = Dataset(y, y, y, np.ones((300, 1)))
    m = fit_marginal(data, "Y", "exponential")
    assert math.exp(m.zeta[0]) == pytest.approx(1 / y.mean(), rel=1e-9)


def test_gamma_consistency():
    rng = np.random.default_rng(11)
    X = np.column_stack([np.ones(10_000), rng.normal(size=10_000)])
    truth = MarginalModel("gamma", [0.3, -0.4], 0.5)
    y = truth.sample(X, rng)
    est = GLMMarginal("gamma").fit(X, y).model_
    assert np.max(np.abs(np.array(est.zeta) - truth.zeta)) < 0.05
    assert est.phi == pytest.approx(0.5, abs=0.05)


def test_rank_deficient_design():
    X = np.column_stack([np.ones(20), np.ones(20)])
    with pytest.raises(RankDeficientError):
        GLMMarginal().fit(X, np.arange(20.0))


@pytest.mark.parametrize("truth", [(0.0, 0.0, 0.0), (0.5, 0.5, 0.5)])
def test_dag_consistency(truth):
    _, data = simulate(DagParams(*truth), 10_000, 3)
    res = fit(data, SPEC)
    est = res.model.dag
    assert max(abs(est.alpha_S - truth[0]), abs(est.beta_M - truth[1]), abs(est.gamma_S - truth[2])) < 0.05


def test_stage2_at_least_zero_dag_value():
    _, data = simulate(DagParams(0.3, -0.2, 0.1), 400, 5)
    res = fit(data, SPEC)
    Z, _ = res.model.scores(data)
    scatter = (Z.T @ Z / data.n)[None]
    at_zero = -float(stage2_objective(np.zeros((1, 1, 3)), scatter)[0, 0]) * data.n
    assert res.stage2_loglik >= at_zero - 1e-9
    assert res.grad_norm < 1e-6


def test_fit_dag_matches_full_fit():
    _, data = simulate(DagParams(0.3, 0.4, 0.1), 500, 6)
    res = fit(data, SPEC)
    dag, ll = fit_dag(data, res.model.marginals)
    assert dag.alpha_S == pytest.approx(res.model.dag.alpha_S, abs=1e-6)
    assert ll == pytest.approx(res.stage2_loglik, rel=1e-9)


def test_fit_is_deterministic_and_permutation_invariant():
    _, data = simulate(DagParams(0.4, 0.3, 0.2), 300, 7)
    a, b = fit(data, SPEC), fit(data, SPEC)
    assert a.to_dict() == b.to_dict()
    perm = np.random.default_rng(0).permutation(data.n)
    c = fit(data.take(perm), SPEC)
    da, dc = a.model.dag, c.model.dag
    np.testing.assert_allclose([da.alpha_S, da.beta_M, da.gamma_S], [dc.alpha_S, dc.beta_M, dc.gamma_S],
                               atol=1e-10)
    for ma, mc in zip(a.model.marginals, c.model.marginals):
        np.testing.assert_allclose(ma.zeta, mc.zeta, atol=1e-10)


def test_estimated_correlations_inside_unit_interval():
    _, data = simulate(DagParams(2.0, 2.0, -1.0), 300, 8)
    R = fit(data, SPEC).model.correlation()
    off = R[np.triu_indices(3, 1)]
    assert np.all(np.abs(off) < 1)


def test_plugin_qnie_near_truth():
    from qmed.estimands import EstimandQuery, qnie
    truth_dag = DagParams(0.5, 0.5, 0.5)
    m, data = simulate(truth_dag, 1000, 9)
    q = EstimandQuery(0.5, 0.0, 1.0, (1.0, 0.0))
    est = qnie(fit(data, SPEC).model, q)
    reps = [qnie(fit(simulate(truth_dag, 1000, 100 + r)[1], SPEC).model, q) for r in range(30)]
    assert abs(est - qnie(m, q)) < 3 * np.std(reps)


def test_batched_rho_matches_single_fits():
    _, data = simulate(DagParams(0.3, 0.3, 0.3), 300, 10)
    res = fit(data, SPEC)
    Z, _ = res.model.scores(data)
    S = np.repeat((Z.T @ Z)[None], 3, axis=0)
    batch = fit_dag_scatter(S, data.n, rho=np.array([-0.3, 0.0, 0.3]))
    for i, r in enumerate((-0.3, 0.0, 0.3)):
        single = fit_dag_scatter((Z.T @ Z)[None], data.n, rho=r)
        np.testing.assert_allclose(batch.theta[i], single.theta[0], atol=1e-6)


def test_sklearn_estimator_contract():
    _, data = simulate(DagParams(0.3, 0.3, 0.3), 200, 12)
    est = GsemMediation(family_y="exponential")
    assert clone(est).get_params() == est.get_params()
    est.fit(data.X, data.y)
    assert est.n_features_in_ == 2
    assert np.isfinite(est.score(data.X, data.y))
    assert est.sample(data.X[:5], random_state=0).shape == (5, 3)
    est.set_params(rho=0.2)
    assert est.get_params()["rho"] == 0.2
