"""Sensitivity to mediator/outcome error correlation, copula goodness of fit,
and p-value aggregation for many candidate mediators."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import Dataset, check_dataset
from .estimands import effect_arrays, exposure_scores
from .estimation import fit, fit_batch, fit_dag_scatter, normalize_spec
from .gsem import copula_loglik_from_scatter, correlation_matrices
from .mediation_tests import AbConfig, BootstrapFailure, Method, run_tests

DEFAULT_RHO_GRID = tuple(np.round(np.arange(-90, 91) / 100.0, 2))
P_CLAMP = 1e-15


# ---------------------------------------------------------------------------
# sensitivity analysis
# ---------------------------------------------------------------------------

@dataclass
class SensitivityCurve:
    rho_grid: np.ndarray
    qnie_at_rho: np.ndarray
    breakpoint_abs_rho: float | None
    observed_abs_corr: float
    flagged: list = field(default_factory=list)   # grid values whose refit failed

    def to_csv(self):
        lines = ["rho,qnie,converged"]
        bad = set(self.flagged)
        for r, v in zip(self.rho_grid, self.qnie_at_rho):
            lines.append(f"{r:.6g},{v:.10g},{int(float(r) not in bad)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"breakpoint_abs_rho": self.breakpoint_abs_rho,
                "observed_abs_corr": self.observed_abs_corr, "flagged": list(self.flagged)}


def latent_residuals(Z, dag):
    """Structural errors ``(eps_M, eps_Y)`` recovered from normal scores."""
    zs, zm, zy = Z[:, 0], Z[:, 1], Z[:, 2]
    a, b, g = dag.alpha_S, dag.beta_M, dag.gamma_S
    eps_m = dag.delta_M * zm - a * zs
    eps_y = dag.delta_Y * zy - g * zs - b * dag.delta_M * zm
    return eps_m, eps_y


class _QnieAtRho:
    """Stage-2 refits with fixed rho on the full-data score scatter."""

    def __init__(self, base, data, q):
        self.model = base.model
        self.n = data.n
        Z, _ = self.model.scores(data)
        self.Z = Z
        self.scatter = Z.T @ Z
        self.z = exposure_scores(self.model.marginal_S, q)
        my = self.model.marginal_Y
        self.y_args = (my.family, my.eta(np.asarray(q.x)), my.phi)
        self.tau = q.tau

    def __call__(self, rhos):
        rhos = np.atleast_1d(np.asarray(rhos, dtype=float))
        res = fit_dag_scatter(np.repeat(self.scatter[None], rhos.size, axis=0), self.n, rho=rhos)
        a, b, g = res.theta.T
        _, nie, _ = effect_arrays(*self.y_args, a, b, g, rhos, self.tau, *self.z)
        return nie, res.converged


def _bisect(f, lo, hi, f_lo, tol=1e-6, max_iter=60):
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        f_mid = float(f(mid)[0][0])
        if f_mid == 0.0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sensitivity_curve(data, spec, q, rho_grid=DEFAULT_RHO_GRID):
    """``qNIE`` re-estimated under hypothesized error correlations ``rho``."""
    check_dataset(data)
    grid = np.asarray(rho_grid, dtype=float)
    if np.any(np.abs(grid) >= 1) or not np.any(grid == 0):
        raise ValueError("rho grid must lie in (-1, 1) and contain 0")
    grid = np.sort(grid)
    base = fit(data, normalize_spec(spec))
    f = _QnieAtRho(base, data, q)
    vals, ok = f(grid)
    # rho = 0 reuses the primary estimate itself.
    d = base.model.dag
    _, nie0, _ = effect_arrays(*f.y_args, d.alpha_S, d.beta_M, d.gamma_S, 0.0, q.tau, *f.z)
    vals[grid == 0] = float(nie0)
    ok[grid == 0] = True
    flagged = [float(r) for r in grid[~ok]]
    best = None
    if nie0 == 0.0:
        best = 0.0
    else:
        gi, gv = grid[ok], vals[ok]
        for i in range(gi.size - 1):
            if gv[i] == 0.0:
                root = gi[i]
            elif np.sign(gv[i]) != np.sign(gv[i + 1]) and gv[i + 1] != 0.0:
                if best is not None and min(abs(gi[i]), abs(gi[i + 1])) >= best:
                    continue
                root = _bisect(f, gi[i], gi[i + 1], gv[i])
            else:
                continue
            if best is None or abs(root) < best:
                best = float(abs(root))
        if gv.size and gv[-1] == 0.0 and (best is None or abs(gi[-1]) < best):
            best = float(abs(gi[-1]))
    eps_m, eps_y = latent_residuals(f.Z, d)
    obs = float(abs(np.corrcoef(eps_m, eps_y)[0, 1]))
    return SensitivityCurve(grid, vals, best, obs, flagged)


# ---------------------------------------------------------------------------
# goodness of fit
# ---------------------------------------------------------------------------

def fold_labels(n, folds, seed):
    perm = np.random.default_rng([int(seed), 0]).permutation(n)
    lab = np.empty(n, int)
    lab[perm] = np.arange(n) % folds
    return lab


def cv_plr_statistic(Z, labels, folds):
    """In-sample minus out-of-sample copula pseudo-log-likelihood, summed
    over folds. ``Z`` is ``(B, n, 3)``; returns ``(T, converged)``."""
    B, n, _ = Z.shape
    total = np.einsum("bni,bnj->bij", Z, Z)
    fold_sc = np.stack([np.einsum("bni,bnj->bij", Z[:, labels == k], Z[:, labels == k])
                        for k in range(folds)], axis=1)                    # (B, K, 3, 3)
    sizes = np.bincount(labels, minlength=folds)
    train_sc = total[:, None] - fold_sc
    n_train = n - sizes
    mean_sc = (train_sc / n_train[None, :, None, None]).reshape(B * folds, 3, 3)
    res = fit_dag_scatter(mean_sc, 1)
    a, b, g = res.theta.T
    R = correlation_matrices(a, b, g).reshape(B, folds, 3, 3)
    ll_train = copula_loglik_from_scatter(R, train_sc, n_train[None, :])
    ll_fold = copula_loglik_from_scatter(R, fold_sc, sizes[None, :])
    T = np.sum(sizes / n_train * ll_train - ll_fold, axis=1)
    return T, res.converged.reshape(B, folds).all(axis=1)


@dataclass
class GofResult:
    statistic: float
    p_value: float
    B: int
    B_effective: int
    folds: int

    def to_dict(self):
        return dict(self.__dict__)


def gof_test(data, spec, folds=5, B=200, seed=0, chunk=100):
    """Cross-validated pseudo-likelihood-ratio test of the Gaussian copula
    with a parametric-bootstrap reference distribution."""
    check_dataset(data)
    if data.n < 4 * folds:
        raise ValueError(f"need n >= 4*folds = {4 * folds}, got {data.n}")
    spec = normalize_spec(spec)
    base = fit(data, spec)
    labels = fold_labels(data.n, folds, seed)
    Z, _ = base.model.scores(data)
    T, ok = cv_plr_statistic(Z[None], labels, folds)
    if not ok[0]:
        raise BootstrapFailure("fold refit failed on the observed data")
    stats = []
    fails = 0
    for start in range(0, B, chunk):
        sims = [base.model.sample(data.X, np.random.default_rng([int(seed), 1, b]))
                for b in range(start, min(B, start + chunk))]
        S, M, Y = (np.stack([getattr(s, k) for s in sims]) for k in "SMY")
        X = np.broadcast_to(data.X, (len(sims),) + data.X.shape)
        fb = fit_batch(spec, S, M, Y, X)
        Zb = np.empty(S.shape + (3,))
        good = fb.converged.copy()
        for i in range(len(sims)):
            if good[i]:
                Zb[i], _ = fb.model(i).scores(sims[i])
        Zb = Zb[good]
        Tb, okb = cv_plr_statistic(Zb, labels, folds)
        fails += int((~good).sum() + (~okb).sum())
        stats.append(Tb[okb])
    stats = np.concatenate(stats)
    if fails > 0.2 * B:
        raise BootstrapFailure(f"{fails} of {B} goodness-of-fit refits failed")
    p = (1 + np.count_nonzero(stats >= T[0])) / (stats.size + 1)
    return GofResult(float(T[0]), float(p), B, int(stats.size), folds)


# ---------------------------------------------------------------------------
# multiple mediators
# ---------------------------------------------------------------------------

def cauchy_combination(p, weights=None):
    """Cauchy combination of possibly dependent p-values."""
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("need at least one p-value")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    if np.any((p < P_CLAMP) | (p > 1 - P_CLAMP)):
        warnings.warn("p-values at 0 or 1 clamped before Cauchy combination", RuntimeWarning, stacklevel=2)
        p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    w = np.full(p.size, 1.0 / p.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    T = np.sum(w * np.tan((0.5 - p) * np.pi))
    return float(0.5 - np.arctan(T) / np.pi)


def bh_fdr(p, q=0.1):
    """Benjamini-Hochberg step-up; returns the selected indices (ascending)."""
    q = float(q)
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    p = np.asarray(p, dtype=float).ravel()
    m = p.size
    if m == 0:
        return []
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if not below.any():
        return []
    k = int(np.flatnonzero(below).max())
    return sorted(int(i) for i in np.flatnonzero(p <= p[order][k]))


@dataclass
class ScreenResult:
    mediators: list
    results: list            # TestResult per mediator
    combined_p: float
    selected: list           # mediator names
    q: float
    method: str

    def to_csv(self):
        lines = ["mediator,estimate,p_value,selected"]
        sel = set(self.selected)
        for name, r in zip(self.mediators, self.results):
            lines.append(f"{name},{r.estimate:.10g},{r.p_value:.10g},{int(name in sel)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"method": self.method, "q": self.q, "combined_p": self.combined_p,
                "selected": list(self.selected),
                "mediators": {n: r.to_dict() for n, r in zip(self.mediators, self.results)}}


def screen(S, mediators, Y, X, spec, q, cfg=None, method=Method.QMA_AB, fdr_q=0.1, names=None):
    """Test each candidate mediator, combine by Cauchy, select by BH.

    ``mediators`` is ``(n, k)``; each column is tested with its own model.
    """
    cfg = cfg or AbConfig()
    method = Method(method)
    mediators = np.asarray(mediators, dtype=float)
    names = names or [f"M{j + 1}" for j in range(mediators.shape[1])]
    results = []
    for j in range(mediators.shape[1]):
        d = Dataset(S, mediators[:, j], Y, X)
        results.append(run_tests(d, spec, q, cfg, [method], seed_key=(cfg.seed, j))[method])
    pv = [r.p_value for r in results]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        combined = cauchy_combination(pv)
    sel = [names[i] for i in bh_fdr(pv, fdr_q)]
    return ScreenResult(list(names), results, combined, sel, float(fdr_q), method.value)


__all__ = [
    "SensitivityCurve", "sensitivity_curve", "latent_residuals", "GofResult", "gof_test",
    "cv_plr_statistic", "cauchy_combination", "bh_fdr", "ScreenResult", "screen", "DEFAULT_RHO_GRID",
]
