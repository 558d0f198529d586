"""Data generation, the counterfactual Monte Carlo oracle and study runners.

Every random draw comes from ``numpy.random.default_rng`` seeded with a key
``(seed, replication, stream, ...)``, so results do not depend on how
replications are split across workers.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from . import marginals as mg
from ._validation import Dataset
from .estimands import EstimandQuery, effects, exposure_scores
from .estimation import fit_batch
from .gsem import DagParams, GsemModel
from .mediation_tests import ALL_METHODS, AbConfig, Method, run_tests

# stream tags inside a replication key
_DATA, _CASE, _BOOT = 0, 1, 2

NULL_CASES = {
    "omega01": (0.5, 0.0),
    "omega02": (0.0, 0.5),
    "omega03": (0.0, 0.0),
}


@dataclass(frozen=True)
class SimScenario:
    n: int = 300
    dag: DagParams = field(default_factory=lambda: DagParams(0.0, 0.0, 0.5))
    zeta_S: tuple = (0.5, 0.2, 0.2, 0.0)
    zeta_M: tuple = (0.8, 0.3, 0.3, 0.4)
    zeta_Y: tuple = (-0.2, 0.4, -0.2, 0.7)
    sigma_S: float = 0.3
    sigma_M: float = 0.3
    x_sd: float = 0.3
    x_corr: float = 0.2
    families: tuple = ("normal", "normal", "exponential")
    R: int = 500
    B: int = 300
    seed: int = 0
    tau: float = 0.5
    s: float = 0.0
    s_prime: float = 1.0
    x: tuple = (1.0, 0.0, 0.0, 0.0)

    @property
    def query(self):
        return EstimandQuery(self.tau, self.s, self.s_prime, self.x)

    def with_paths(self, alpha, beta, gamma=None):
        g = self.dag.gamma_S if gamma is None else gamma
        return replace(self, dag=DagParams(alpha, beta, g, self.dag.rho))

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "dag"}
        d["dag"] = self.dag.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "dag" in d and isinstance(d["dag"], dict):
            d["dag"] = DagParams(**d["dag"])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def true_model(sc):
    disp = (sc.sigma_S ** 2, sc.sigma_M ** 2, 1.0)
    margs = [mg.MarginalModel(f, z, p) for f, z, p in
             zip(sc.families, (sc.zeta_S, sc.zeta_M, sc.zeta_Y), disp)]
    return GsemModel(*margs, sc.dag)


def sample_x(sc, n, rng):
    k = len(sc.zeta_S) - 1
    cov = sc.x_sd ** 2 * ((1 - sc.x_corr) * np.eye(k) + sc.x_corr * np.ones((k, k)))
    return np.column_stack([np.ones(n), rng.multivariate_normal(np.zeros(k), cov, size=n)])


def sample_gsem(sc, rng, n=None):
    """One dataset of size ``n`` (default ``sc.n``) from the scenario's true model."""
    n = sc.n if n is None else n
    X = sample_x(sc, n, rng)
    return true_model(sc).sample(X, rng)


def counterfactual_oracle(model, q, n_mc=10 ** 6, rng=None, n_batches=50):
    """Monte Carlo qNDE/qNIE from nested counterfactual draws.

    Returns ``(qnde, qnie, se_qnde, se_qnie)``; standard errors come from
    ``n_batches`` independent batches.
    """
    rng = np.random.default_rng(rng)
    d = model.dag
    z_s, z_sp = exposure_scores(model.marginal_S, q)
    my = model.marginal_Y
    eta_y = my.eta(np.asarray(q.x))
    m = n_mc // n_batches
    nde, nie = np.empty(n_batches), np.empty(n_batches)
    for k in range(n_batches):
        e_m = rng.standard_normal(m)
        e_y = d.rho * e_m + math.sqrt(1 - d.rho ** 2) * rng.standard_normal(m)

        def outcome(za, zb):
            w = d.gamma_S * za + d.beta_M * (d.alpha_S * zb + e_m) + e_y
            # Q_Y(Phi(.)) is increasing, so it commutes with the empirical quantile.
            w_tau = np.quantile(w / d.delta_Y, q.tau, method="inverted_cdf")
            return mg.ppf_of_normal(my.family, eta_y, my.phi, w_tau)

        y_ss, y_sps, y_spsp = outcome(z_s, z_s), outcome(z_sp, z_s), outcome(z_sp, z_sp)
        nde[k], nie[k] = y_sps - y_ss, y_spsp - y_sps
    se = lambda v: float(v.std(ddof=1) / math.sqrt(n_batches))
    return float(nde.mean()), float(nie.mean()), se(nde), se(nie)


# ---------------------------------------------------------------------------
# study report
# ---------------------------------------------------------------------------

@dataclass
class StudyReport:
    kind: str
    settings: dict
    rows: list                       # one dict per (label, method) cell
    pvalues: dict = field(default_factory=dict)   # "label|method" -> list
    runtime_s: float = 0.0
    decisions: dict = field(default_factory=dict)  # "label|method" -> per-replication rejections

    def rate(self, label, method):
        for r in self.rows:
            if r["label"] == label and r["method"] == Method(method).value:
                return r["rejection_rate"]
        raise KeyError((label, method))

    def p_values(self, label, method):
        return np.asarray(self.pvalues[f"{label}|{Method(method).value}"])

    def rejections(self, label, method):
        return np.asarray(self.decisions[f"{label}|{Method(method).value}"], dtype=bool)

    def to_json(self):
        return json.dumps({"kind": self.kind, "settings": self.settings, "rows": self.rows,
                           "pvalues": self.pvalues, "decisions": self.decisions,
                           "runtime_s": self.runtime_s},
                          indent=2, sort_keys=True)

    def summary_csv(self):
        keys = sorted({k for r in self.rows for k in r}, key=_col_order)
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(k, "")) for k in keys))
        return "\n".join(lines) + "\n"

    def qq_csv(self):
        lines = ["label,method,uniform_quantile,p_value"]
        for key, ps in self.pvalues.items():
            label, method = key.split("|")
            ps = np.sort(np.asarray(ps))
            u = (np.arange(1, ps.size + 1) - 0.5) / ps.size
            lines += [f"{label},{method},{a:.6g},{b:.6g}" for a, b in zip(u, ps)]
        return "\n".join(lines) + "\n"


_ORDER = ["label", "method", "alpha_S", "beta_M", "n", "R", "rejections", "rejection_rate", "se"]


def _col_order(k):
    return (_ORDER.index(k), k) if k in _ORDER else (len(_ORDER), k)


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _rejection_row(label, method, rejects, extra=None):
    rejects = np.asarray(rejects, dtype=bool)
    R = rejects.size
    rate = float(rejects.mean()) if R else math.nan
    row = {"label": label, "method": Method(method).value, "R": int(R),
           "rejections": int(rejects.sum()), "rejection_rate": rate,
           "se": math.sqrt(rate * (1 - rate) / R) if R else math.nan}
    row.update(extra or {})
    return row


# ---------------------------------------------------------------------------
# replication workers
# ---------------------------------------------------------------------------

def resolve_jobs(jobs=None):
    if jobs is None:
        jobs = int(os.environ.get("QMED_JOBS", "1"))
    return max(1, int(jobs))


def _one_test_replication(sc, r, methods, cfg, case_probs=None):
    """Data + tests for replication ``r``; failures are recorded, not raised."""
    case = None
    if case_probs is not None:
        labels, probs = zip(*case_probs)
        pick = np.random.default_rng([sc.seed, r, _CASE]).choice(len(labels), p=probs)
        case = labels[pick]
        sc = sc.with_paths(*NULL_CASES[case])
    data = sample_gsem(sc, np.random.default_rng([sc.seed, r, _DATA]))
    try:
        res = run_tests(data, sc.families, sc.query, cfg, methods, seed_key=(sc.seed, r, _BOOT))
        out = {m.value: (t.p_value, t.reject, t.estimate) for m, t in res.items()}
    except Exception as exc:  # noqa: BLE001 - recorded as a failed replication
        out = {"error": f"{type(exc).__name__}: {exc}"}
    return case, out


def _run_replications(sc, methods, cfg, jobs, case_probs=None):
    jobs = resolve_jobs(jobs)
    work = [delayed(_one_test_replication)(sc, r, methods, cfg, case_probs) for r in range(sc.R)]
    if jobs == 1:
        return [w[0](*w[1], **w[2]) for w in work]
    return Parallel(n_jobs=jobs)(work)


def _collect(results, methods, label, extra=None):
    rows, pvals, decisions = [], {}, {}
    failures = [o["error"] for _, o in results if "error" in o]
    good = [o for _, o in results if "error" not in o]
    for m in methods:
        m = Method(m)
        rej = [o[m.value][1] for o in good]
        row = _rejection_row(label, m, rej, extra)
        row["failed_replications"] = len(failures)
        rows.append(row)
        pvals[f"{label}|{m.value}"] = [float(o[m.value][0]) for o in good]
        decisions[f"{label}|{m.value}"] = [bool(v) for v in rej]
    return rows, pvals, decisions, failures


def _cfg(sc, lambda_scale=2.0, omega=0.05, centered_z=True):
    return AbConfig(B=sc.B, lambda_scale=lambda_scale, omega=omega, seed=sc.seed, centered_z=centered_z)


def run_null_study(scenario, cases=("omega01", "omega02", "omega03"), methods=ALL_METHODS,
                   jobs=None, cfg=None):
    """Rejection rates and p-values under fixed null configurations."""
    if scenario.R < 100:
        raise ValueError("null studies need R >= 100")
    t0 = time.time()
    cfg = cfg or _cfg(scenario)
    methods = [Method(m) for m in methods]
    rows, pvals, decs, fails = [], {}, {}, {}
    for case in cases:
        sc = scenario.with_paths(*NULL_CASES[case])
        res = _run_replications(sc, methods, cfg, jobs)
        r, p, dd, f = _collect(res, methods, case, {"alpha_S": sc.dag.alpha_S, "beta_M": sc.dag.beta_M,
                                                    "n": sc.n})
        rows += r
        pvals.update(p)
        decs.update(dd)
        fails[case] = f
    settings = {"scenario": scenario.to_dict(), "cases": list(cases), "B": cfg.B,
                "lambda_scale": cfg.lambda_scale, "omega": cfg.omega, "centered_z": cfg.centered_z,
                "failures": fails}
    return StudyReport("null", settings, rows, pvals, time.time() - t0, decs)


def run_mixture_null_study(probabilities, scenario, methods=ALL_METHODS, jobs=None, cfg=None):
    """Each replication first draws its null case with ``probabilities``
    over ``(omega01, omega02, omega03)``."""
    probs = np.asarray(probabilities, dtype=float)
    if probs.shape != (3,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("probabilities must be three nonnegative numbers summing to 1")
    t0 = time.time()
    cfg = cfg or _cfg(scenario)
    methods = [Method(m) for m in methods]
    case_probs = list(zip(NULL_CASES, probs / probs.sum()))
    res = _run_replications(scenario, methods, cfg, jobs, case_probs)
    label = "mix(" + ",".join(f"{p:g}" for p in probs) + ")"
    rows, pvals, decs, fails = _collect(res, methods, label, {"n": scenario.n})
    counts = {c: sum(1 for case, _ in res if case == c) for c in NULL_CASES}
    settings = {"scenario": scenario.to_dict(), "probabilities": probs.tolist(), "case_counts": counts,
                "B": cfg.B, "lambda_scale": cfg.lambda_scale, "omega": cfg.omega,
                "centered_z": cfg.centered_z, "failures": fails}
    return StudyReport("mixture", settings, rows, pvals, time.time() - t0, decs)


def power_grid(kind, k=5):
    """(i) ``alpha = beta`` from 0 to 0.2; (ii) ``alpha*beta = 0.04`` with
    ratios ``alpha/beta`` in {1/4, 1/2, 1, 2, 4}."""
    if kind in ("i", "equal"):
        return [(float(v), float(v)) for v in np.linspace(0.0, 0.2, k)]
    if kind in ("ii", "ratio"):
        return [(0.2 * math.sqrt(r), 0.2 / math.sqrt(r)) for r in (0.25, 0.5, 1.0, 2.0, 4.0)]
    raise ValueError(f"unknown power grid {kind!r}")


def run_power_study(scenario, grid="i", methods=ALL_METHODS, jobs=None, cfg=None):
    """Rejection-rate curves over a grid of ``(alpha_S, beta_M)``."""
    t0 = time.time()
    cfg = cfg or _cfg(scenario)
    methods = [Method(m) for m in methods]
    points = power_grid(grid) if isinstance(grid, str) else [tuple(map(float, g)) for g in grid]
    rows, pvals, decs, fails = [], {}, {}, {}
    for a, b in points:
        sc = scenario.with_paths(a, b)
        label = f"a={a:.4g},b={b:.4g}"
        res = _run_replications(sc, methods, cfg, jobs)
        r, p, dd, f = _collect(res, methods, label, {"alpha_S": a, "beta_M": b, "n": sc.n})
        rows += r
        pvals.update(p)
        decs.update(dd)
        fails[label] = f
    settings = {"scenario": scenario.to_dict(), "grid": [list(p) for p in points], "B": cfg.B,
                "lambda_scale": cfg.lambda_scale, "omega": cfg.omega, "centered_z": cfg.centered_z,
                "failures": fails}
    return StudyReport("power", settings, rows, pvals, time.time() - t0, decs)


# ---------------------------------------------------------------------------
# MSE study
# ---------------------------------------------------------------------------

def _mse_chunk(sc, n, reps):
    data = [sample_gsem(sc, np.random.default_rng([sc.seed, r, _DATA, n]), n=n) for r in reps]
    S, M, Y, X = (np.stack([getattr(d, k) for d in data]) for k in ("S", "M", "Y", "X"))
    fb = fit_batch(sc.families, S, M, Y, X)
    q = sc.query
    est = np.full((len(reps), 2), np.nan)
    for i in range(len(reps)):
        if fb.converged[i]:
            v = effects(fb.model(i), q)
            est[i] = (v.qnde, v.qnie)
    return est


def run_mse_study(scenario, n_grid=(200, 400, 600, 800, 1000),
                  dag_grid=((0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)), jobs=None, chunk=50):
    """MSE of plug-in qNIE/qNDE and ratios relative to the first ``n``."""
    t0 = time.time()
    jobs = resolve_jobs(jobs)
    rows = []
    for a, b in dag_grid:
        sc = scenario.with_paths(a, b)
        truth = effects(true_model(sc), sc.query)
        base = {}
        for n in n_grid:
            parts = [delayed(_mse_chunk)(sc, n, range(i, min(i + chunk, sc.R)))
                     for i in range(0, sc.R, chunk)]
            if jobs == 1:
                ests = [p[0](*p[1], **p[2]) for p in parts]
            else:
                ests = Parallel(n_jobs=jobs)(parts)
            est = np.concatenate(ests)
            ok = np.isfinite(est).all(axis=1)
            mse_nde = float(np.mean((est[ok, 0] - truth.qnde) ** 2))
            mse_nie = float(np.mean((est[ok, 1] - truth.qnie) ** 2))
            base.setdefault("nde", mse_nde)
            base.setdefault("nie", mse_nie)
            rows.append({"label": f"a={a:g},b={b:g}", "method": "plug-in", "alpha_S": a, "beta_M": b,
                         "n": int(n), "R": int(ok.sum()), "failed_replications": int((~ok).sum()),
                         "mse_qnie": mse_nie, "mse_qnde": mse_nde,
                         "ratio_qnie": base["nie"] / mse_nie, "ratio_qnde": base["nde"] / mse_nde,
                         "true_qnie": truth.qnie, "true_qnde": truth.qnde})
    settings = {"scenario": scenario.to_dict(), "n_grid": list(n_grid),
                "dag_grid": [list(g) for g in dag_grid]}
    return StudyReport("mse", settings, rows, {}, time.time() - t0)


def ks_uniform(p):
    """Kolmogorov-Smirnov distance of ``p`` from Uniform(0, 1)."""
    return float(stats.kstest(np.asarray(p), "uniform").statistic)


def binomial_band(R, z=1.96, p=0.05):
    half = z * math.sqrt(p * (1 - p) / R)
    return p - half, p + half


__all__ = [
    "SimScenario", "StudyReport", "NULL_CASES", "true_model", "sample_x", "sample_gsem",
    "counterfactual_oracle", "run_null_study", "run_mixture_null_study", "run_power_study",
    "run_mse_study", "power_grid", "ks_uniform", "resolve_jobs",
]
