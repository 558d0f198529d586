"""End-to-end acceptance checks; each test prints one ``ACCEPTANCE k`` line."""
import math

import numpy as np
import pytest
from scipy import special, stats

from qmed._validation import Dataset
from qmed.diagnostics import bh_fdr, cauchy_combination, screen
from qmed.estimands import EstimandQuery, effects, estimand_curve, qnie
from qmed.gsem import DagParams, GsemModel, gaussian_copula_log_density, implied_correlation
from qmed.marginals import MarginalModel
from qmed.mediation_tests import AbConfig, ab_test, classical_bootstrap_test
from qmed.simulation import (SimScenario, counterfactual_oracle, ks_uniform, run_mixture_null_study,
                             run_mse_study, run_null_study, run_power_study, sample_gsem, sample_x)

SEED = 2024
N01 = MarginalModel("normal", [0.0], 1.0)
EXP1 = MarginalModel("exponential", [0.0])
COMPETITORS = ("qma-b", "poc-b", "poc-ym", "js-b", "js-ym")


def example2():
    return GsemModel(N01, N01, EXP1, DagParams(1.0, 1.0, 0.0))


def test_1_closed_form_matches_counterfactual_oracle(acceptance):
    rng = np.random.default_rng(SEED)
    y_models = [EXP1, MarginalModel("gamma", [0.3], 0.5), MarginalModel("normal", [1.0], 2.0)]
    settings = [(example2(), EstimandQuery(0.5, 0.0, 1.0, (1.0,)))]
    for i in range(20):
        a, b, g = rng.uniform(-1, 1, 3)
        s, sp = rng.normal(size=2)
        m = GsemModel(N01, N01, y_models[i % 3], DagParams(a, b, g))
        settings.append((m, EstimandQuery(rng.uniform(0.1, 0.9), s, sp, (1.0,))))
    worst = 0.0
    for k, (m, q) in enumerate(settings):
        _, nie_mc, _, se = counterfactual_oracle(m, q, 10 ** 6, np.random.default_rng([SEED, k]))
        # Normal outcomes make the paired draws differ by a constant, so the
        # batch SE is pure rounding; allow float slack on top of 3 SE.
        worst = max(worst, abs(qnie(m, q) - nie_mc) / (se + 1e-12 / 3))
    ex2 = qnie(*settings[0])
    ok = worst <= 3.0 and abs(ex2 - 0.57313) < 2e-4
    acceptance(1, ok, f"max |closed - MC|/SE = {worst:.2f} over 21 settings; Example 2 qNIE = {ex2:.5f}")
    assert ok


def test_2_figure_curve(acceptance):
    grid = [round(0.05 * k, 2) for k in range(1, 20)]
    vals = estimand_curve(example2(), 0.0, 1.0, (1.0,), grid)
    nde = max(abs(v.qnde) for v in vals)
    nie = [v.qnie for v in vals]
    inc = all(b > a for a, b in zip(nie, nie[1:]))
    ok = nde <= 1e-12 and inc
    acceptance(2, ok, f"max |qNDE| = {nde:.1e}; qNIE strictly increasing = {inc} ({nie[0]:.4f} .. {nie[-1]:.4f})")
    assert ok


@pytest.mark.parametrize("sd_s, sd_y", [(1.0, 1.0), (2.0, 3.0)])
def test_3_normal_margins_tau_invariant(acceptance, sd_s, sd_y):
    d = DagParams(0.5, 0.5, 0.5)
    m = GsemModel(MarginalModel("normal", [0.0], sd_s ** 2), N01, MarginalModel("normal", [0.0], sd_y ** 2), d)
    vals = [effects(m, EstimandQuery(t, 0.0, 1.0, (1.0,))) for t in np.linspace(0.05, 0.95, 19)]
    nde_ref = sd_y * d.gamma_S / (sd_s * d.delta_Y)
    nie_ref = sd_y * d.alpha_S * d.beta_M / (sd_s * d.delta_Y)
    err = max(max(abs(v.qnde - nde_ref), abs(v.qnie - nie_ref)) for v in vals)
    ok = err <= 1e-8
    acceptance(3, ok, f"sigma_S={sd_s:g}, sigma_Y={sd_y:g}: max deviation {err:.1e} "
                      f"(qNDE {nde_ref:.5f}, qNIE {nie_ref:.5f})")
    assert ok


def test_4_mse_rate_ratios(acceptance):
    rep = run_mse_study(SimScenario(R=500, seed=SEED), n_grid=(200, 800))
    cells = {(r["alpha_S"], r["beta_M"]): r for r in rep.rows if r["n"] == 800}
    nie00, nie55 = cells[(0.0, 0.0)]["ratio_qnie"], cells[(0.5, 0.5)]["ratio_qnie"]
    nde = [c["ratio_qnde"] for c in cells.values()]
    ok = nie00 >= 10 and 2.5 <= nie55 <= 6 and all(2.5 <= v <= 6 for v in nde)
    acceptance(4, ok, f"qNIE ratio (0,0) = {nie00:.2f}, (0.5,0.5) = {nie55:.2f}; "
                      f"qNDE ratios = {', '.join(f'{v:.2f}' for v in nde)}")
    assert ok


@pytest.fixture(scope="module")
def null_report():
    return run_null_study(SimScenario(n=300, R=500, B=300, seed=SEED))


@pytest.mark.slow
def test_5_type_one_error(acceptance, null_report):
    rep = null_report
    ab = {c: rep.rate(c, "qma-ab") for c in ("omega01", "omega02", "omega03")}
    others = {m: rep.rate("omega03", m) for m in ("qma-b", "js-b", "js-ym")}
    ks = ks_uniform(rep.p_values("omega03", "qma-ab"))
    band = 1.36 / math.sqrt(500)
    ok = all(0.03 <= v <= 0.08 for v in ab.values()) and all(v < 0.02 for v in others.values()) and ks < band
    acceptance(5, ok, "AB " + ", ".join(f"{c}={v:.3f}" for c, v in ab.items())
               + "; omega03 " + ", ".join(f"{m}={v:.3f}" for m, v in others.items())
               + f"; KS(AB, omega03) = {ks:.4f} < {band:.4f}")
    assert ok


@pytest.mark.slow
def test_6_mixture_null(acceptance):
    rep = run_mixture_null_study((0.05, 0.05, 0.9), SimScenario(n=300, R=500, B=300, seed=SEED + 1))
    label = rep.rows[0]["label"]
    ab = rep.rate(label, "qma-ab")
    comp = {m: rep.rate(label, m) for m in COMPETITORS}
    ok = 0.03 <= ab <= 0.08 and all(v < 0.03 for v in comp.values())
    acceptance(6, ok, f"AB = {ab:.3f}; " + ", ".join(f"{m}={v:.3f}" for m, v in comp.items()))
    assert ok


@pytest.mark.slow
def test_7_power_paired(acceptance):
    sc = SimScenario(n=300, R=500, B=300, seed=SEED + 2)
    rep = run_power_study(sc, grid=[(0.2, 0.2)], methods=("qma-ab", "qma-b"))
    label = rep.rows[0]["label"]
    d = rep.rejections(label, "qma-ab").astype(float) - rep.rejections(label, "qma-b").astype(float)
    se = d.std(ddof=1) / math.sqrt(d.size)
    ok = d.mean() > 0 and d.mean() >= 2 * se
    acceptance(7, ok, f"power AB = {rep.rate(label, 'qma-ab'):.3f}, QMA-B = {rep.rate(label, 'qma-b'):.3f}; "
                      f"paired difference {d.mean():.3f} = {d.mean() / se:.1f} SE")
    assert ok


def test_8_gradient_vanishes_only_at_double_null(acceptance):
    q = EstimandQuery(0.5, 0.0, 1.0, (1.0,))
    h = 1e-5

    def grad(a, b):
        f = lambda a_, b_: qnie(GsemModel(N01, N01, EXP1, DagParams(a_, b_, 0.5)), q)
        return np.array([(f(a + h, b) - f(a - h, b)) / (2 * h), (f(a, b + h) - f(a, b - h)) / (2 * h)])

    g00, g05, g50 = (np.max(np.abs(grad(*p))) for p in ((0, 0), (0, 0.5), (0.5, 0)))
    ok = g00 < 1e-10 and g05 > 1e-3 and g50 > 1e-3
    acceptance(8, ok, f"|grad| at (0,0) = {g00:.1e}, (0,0.5) = {g05:.4f}, (0.5,0) = {g50:.4f}")
    assert ok


def test_9_degenerate_lambda_equivalence(acceptance):
    same = 0
    cases = [(0.0, 0.0), (0.5, 0.0), (0.2, 0.2)]
    for k, (a, b) in enumerate(cases):
        sc = SimScenario(n=300).with_paths(a, b)
        data = sample_gsem(sc, np.random.default_rng([SEED, k]))
        cfg = AbConfig(B=300, lambda_scale=0.0, seed=SEED + k)
        r_ab, r_cl = ab_test(data, sc.families, sc.query, cfg), classical_bootstrap_test(data, sc.families,
                                                                                       sc.query, cfg)
        same += (r_ab.p_value, r_ab.reject, r_ab.interval) == (r_cl.p_value, r_cl.reject, r_cl.interval)
    ok = same == len(cases)
    acceptance(9, ok, f"{same}/{len(cases)} datasets give identical p-value, decision and interval")
    assert ok


def test_10_unit_oracles(acceptance):
    checks = {
        "cauchy(0.5,0.5,0.5)": cauchy_combination([0.5, 0.5, 0.5]) == 0.5,
        "cauchy(p1)": cauchy_combination([0.42]) == pytest.approx(0.42, abs=1e-14),
        "cauchy(0.01,0.5)": round(cauchy_combination([0.01, 0.5]), 4) in (0.0199, 0.02)
        and abs(cauchy_combination([0.01, 0.5]) - 0.0199) < 1e-4,
        "bh(0.01,0.02,0.9)": bh_fdr([0.01, 0.02, 0.9], 0.1) == [0, 1],
        "bh(all 1)": bh_fdr([1.0, 1.0, 1.0], 0.1) == [],
        "bh(0.05)": bh_fdr([0.05], 0.1) == [0],
    }
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(200):
        R = implied_correlation(DagParams(*rng.uniform(-2, 2, 3)))
        z = rng.normal(size=3) * 2
        ref = stats.multivariate_normal(np.zeros(3), R).logpdf(z) - stats.norm.logpdf(z).sum()
        worst = max(worst, abs(gaussian_copula_log_density(z, R) - ref))
    z = np.ones(3)
    R = implied_correlation(DagParams(1, 1, 0))
    ref = stats.multivariate_normal(np.zeros(3), R).logpdf(z) - stats.norm.logpdf(z).sum()
    worst = max(worst, abs(gaussian_copula_log_density(z, R) - ref))
    checks["copula oracle"] = worst <= 1e-10
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance(10, ok, f"{sum(checks.values())}/{len(checks)} oracle checks; copula max error {worst:.1e}"
               + (f"; failed {failed}" if failed else ""))
    assert ok


def multi_mediator_data(n, paths, signal, seed):
    """Latent linear SEM with k mediators sharing S and Y, pushed through
    normal exposure/mediator and exponential outcome marginals."""
    rng = np.random.default_rng(seed)
    sc = SimScenario(n=n)
    X = sample_x(sc, n, rng)
    k = len(paths)
    a = np.array([p[0] for p in paths]) * signal
    b = np.array([p[1] for p in paths]) * signal
    ws = rng.standard_normal(n)
    wm = ws[:, None] * a + rng.standard_normal((n, k))
    wy = 0.5 * ws + wm @ b + rng.standard_normal(n)
    sd_y = math.sqrt((0.5 + a @ b) ** 2 + b @ b + 1.0)
    zs, zm, zy = ws, wm / np.sqrt(a ** 2 + 1.0), wy / sd_y
    ms = MarginalModel("normal", sc.zeta_S, sc.sigma_S ** 2)
    mm = MarginalModel("normal", sc.zeta_M, sc.sigma_M ** 2)
    my = MarginalModel("exponential", sc.zeta_Y)
    S = ms.eta(X) + sc.sigma_S * zs
    M = mm.eta(X)[:, None] + sc.sigma_M * zm
    Y = -special.log_ndtr(-zy) / np.exp(my.eta(X))
    return sc, S, M, Y, X


def test_11_multi_mediator_screen(acceptance):
    # three planted mediators; the rest are null through one or both paths
    paths = [(1, 1)] * 3 + [(1, 0)] * 2 + [(0, 1)] * 2 + [(0, 0)] * 3
    sc, S, M, Y, X = multi_mediator_data(500, paths, 0.5, SEED)
    res = screen(S, M, Y, X, sc.families, sc.query, AbConfig(B=300, seed=SEED), fdr_q=0.1)
    truth = {f"M{j + 1}" for j, p in enumerate(paths) if p == (1, 1)}
    sel = set(res.selected)
    recall = len(sel & truth) / len(truth)
    false = sorted(sel - truth)
    ok = not false and recall >= 0.8
    acceptance(11, ok, f"selected {sorted(sel)}; planted {sorted(truth)}; recall {recall:.2f}; "
                       f"false selections {false or 'none'}; Cauchy-combined p {res.combined_p:.2e}")
    assert ok
