"""Two-stage (inference functions for margins) fitting of the generalized SEM.

Stage 1 fits the three GLM marginals; stage 2 maximizes the Gaussian copula
log-likelihood of the resulting normal scores over the DAG coefficients.
The stage-2 objective only depends on the 3x3 scatter matrix of the scores,
which is what makes batched bootstrap refits cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import marginals as mg
from ._validation import Dataset, check_dataset, check_gsem_xy
from .glm import ConvergenceError, check_full_rank, fit_marginal_batch
from .gsem import DagParams, GsemModel, correlation_matrices, joint_log_likelihood

GTOL = 1e-6
FTOL = 1e-10
FD_STEP = 1e-6


def normalize_spec(spec):
    """Turn ``('normal', 'normal', ('exponential', 'log'))``-style input into enum pairs."""
    if spec is None:
        spec = ("normal", "normal", "normal")
    if len(spec) != 3:
        raise ValueError("spec needs one (family, link) entry per margin S, M, Y")
    out = []
    for entry in spec:
        if isinstance(entry, (tuple, list)):
            out.append(mg.check_family_link(*entry))
        else:
            out.append(mg.check_family_link(entry))
    return tuple(out)


# ---------------------------------------------------------------------------
# stage 2: batched quasi-Newton on the copula likelihood
# ---------------------------------------------------------------------------

def _unpack(theta, rho):
    a, b, g = theta[..., 0], theta[..., 1], theta[..., 2]
    r = np.tanh(theta[..., 3]) if theta.shape[-1] == 4 else rho
    return a, b, g, r


def stage2_objective(theta, mean_scatter, rho=0.0):
    """Negative mean copula log-likelihood.

    ``theta`` has shape ``(B, K, d)`` (``d = 3``, or 4 with ``atanh(rho)``
    appended); ``mean_scatter`` has shape ``(B, 3, 3)``; ``rho`` broadcasts
    against ``(B, K)``. Non-positive-definite points return ``+inf``.
    """
    a, b, g, r = _unpack(theta, rho)
    R = correlation_matrices(a, b, g, r)
    det = np.linalg.det(R)
    ok = det > 1e-300
    inv = np.linalg.inv(np.where(ok[..., None, None], R, np.eye(3)))
    tr = np.einsum("bkij,bji->bk", inv - np.eye(3), mean_scatter)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 0.5 * np.log(np.where(ok, det, 1.0)) + 0.5 * tr
    return np.where(ok & np.isfinite(val), val, np.inf)


def _fd_gradient(f, x):
    B, d = x.shape
    h = FD_STEP * np.maximum(1.0, np.abs(x))
    pts = np.repeat(x[:, None, :], 2 * d, axis=1)
    idx = np.arange(d)
    pts[:, idx, idx] += h
    pts[:, d + idx, idx] -= h
    vals = f(pts)
    return (vals[:, :d] - vals[:, d:]) / (2.0 * h)


def bfgs_batch(f, x0, max_iter=200, gtol=GTOL, ftol=FTOL):
    """Minimize ``B`` independent smooth problems with central-difference BFGS.

    ``f`` maps ``(B, K, d)`` to ``(B, K)``. Convergence needs both the
    gradient norm below ``gtol`` and the relative objective change below
    ``ftol``. Returns ``(x, fx, grad_norm, iterations, converged)``.
    """
    x = np.array(x0, dtype=float)
    B, d = x.shape
    fx = f(x[:, None, :])[:, 0]
    g = _fd_gradient(f, x)
    H = np.tile(np.eye(d), (B, 1, 1))
    fprev = np.full(B, np.inf)
    it = np.zeros(B, int)
    conv = np.zeros(B, bool)
    failed = ~np.isfinite(fx)
    for _ in range(max_iter):
        gn = np.linalg.norm(g, axis=1)
        conv |= (gn < gtol) & (np.abs(fprev - fx) <= ftol * np.maximum(1.0, np.abs(fx)))
        act = ~conv & ~failed
        if not act.any():
            break
        p = -np.einsum("bij,bj->bi", H, g)
        slope = np.einsum("bi,bi->b", p, g)
        reset = slope >= 0
        if reset.any():
            H[reset] = np.eye(d)
            p[reset] = -g[reset]
            slope = np.einsum("bi,bi->b", p, g)
        t = np.ones(B)
        accepted = np.zeros(B, bool)
        fnew = fx.copy()
        for _ in range(60):
            pending = act & ~accepted
            if not pending.any():
                break
            ft = f((x + t[:, None] * p)[:, None, :])[:, 0]
            good = pending & np.isfinite(ft) & (ft <= fx + 1e-4 * t * slope)
            fnew = np.where(good, ft, fnew)
            accepted |= good
            t = np.where(pending & ~good, 0.5 * t, t)
        stalled = act & ~accepted
        # A line search can only stall at a stationary point or on a bad model.
        conv |= stalled & (gn < gtol)
        failed |= stalled & ~(gn < gtol)
        mv = act & accepted
        s = np.where(mv[:, None], t[:, None] * p, 0.0)
        x = x + s
        gnew = np.where(mv[:, None], _fd_gradient(f, x), g)
        y = gnew - g
        sy = np.einsum("bi,bi->b", s, y)
        upd = mv & (sy > 1e-14)
        if upd.any():
            rho_ = 1.0 / sy[upd]
            I = np.eye(d)
            V = I - rho_[:, None, None] * np.einsum("bi,bj->bij", s[upd], y[upd])
            H[upd] = (np.einsum("bij,bjk,blk->bil", V, H[upd], V)
                      + rho_[:, None, None] * np.einsum("bi,bj->bij", s[upd], s[upd]))
        fprev = np.where(mv, fx, fprev)
        fx = np.where(mv, fnew, fx)
        g = gnew
        it += mv
    gn = np.linalg.norm(g, axis=1)
    return x, fx, gn, it, conv & ~failed


class _Stage2:
    """Batched stage-2 objective with per-problem subsetting."""

    def __init__(self, mean_scatter, rho):
        self.mean_scatter = mean_scatter
        self.rho = np.broadcast_to(np.asarray(rho, dtype=float), mean_scatter.shape[:1])

    def __call__(self, theta):
        return stage2_objective(theta, self.mean_scatter, self.rho[:, None])

    def subset(self, mask):
        return _Stage2(self.mean_scatter[mask], self.rho[mask])


@dataclass
class DagFitBatch:
    theta: np.ndarray       # (B, 3) alpha, beta, gamma
    rho: np.ndarray         # (B,)
    loglik: np.ndarray      # (B,) summed copula log-likelihood
    grad_norm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    def dag(self, b=0):
        a, be, g = self.theta[b]
        return DagParams(a, be, g, float(self.rho[b]))


def fit_dag_scatter(scatter, n, rho=0.0, estimate_rho=False, max_iter=200):
    """Stage 2 from score scatter matrices ``sum_i z_i z_i^T`` of shape ``(B, 3, 3)``."""
    scatter = np.asarray(scatter, dtype=float)
    B = scatter.shape[0]
    mean_scatter = scatter / n
    obj = _Stage2(mean_scatter, rho)
    d = 4 if estimate_rho else 3
    x0 = np.zeros((B, d))
    x, fx, gn, it, conv = bfgs_batch(obj, x0, max_iter=max_iter)
    bad = np.flatnonzero(~conv)
    for i in bad:
        # Simplex restart, then one more quasi-Newton pass to certify.
        sub = obj.subset(np.arange(B) == i)
        res = optimize.minimize(lambda th: sub(th[None, None, :])[0, 0], x[i],
                                method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        xi, fi, gi, iti, ci = bfgs_batch(sub, res.x[None], max_iter=max_iter)
        x[i], fx[i], gn[i], conv[i] = xi[0], fi[0], gi[0], ci[0]
        it[i] += res.nit + iti[0]
    rho_hat = np.tanh(x[:, 3]) if estimate_rho else obj.rho.copy()
    return DagFitBatch(x[:, :3], rho_hat, -fx * n, gn, it, conv)


def score_matrix_batch(spec, fits, S, M, Y, X):
    """Normal scores ``(B, n, 3)`` and clamp counts from fitted marginal batches."""
    Z = np.empty(S.shape + (3,))
    clamps = np.zeros(S.shape[0], int)
    for j, (res, v) in enumerate(zip(fits, (S, M, Y))):
        eta = np.einsum("bni,bi->bn", X, res.zeta)
        Z[..., j], c = mg.normal_scores(res.family, eta, res.phi[:, None], v)
        clamps += c.sum(axis=1)
    return Z, clamps


@dataclass
class FitBatch:
    spec: tuple
    marginals: tuple          # three MarginalFitBatch
    dag: DagFitBatch
    clamp_count: np.ndarray
    n: int

    @property
    def converged(self):
        ok = self.dag.converged.copy()
        for m in self.marginals:
            ok &= m.converged
        return ok

    def model(self, b=0):
        return GsemModel(*(m.model(b) for m in self.marginals), self.dag.dag(b))


def fit_batch(spec, S, M, Y, X, rho=0.0, estimate_rho=False, max_iter=100):
    """Fit the full model to ``B`` stacked datasets of equal size."""
    spec = normalize_spec(spec)
    S, M, Y = (np.asarray(v, dtype=float) for v in (S, M, Y))
    X = np.asarray(X, dtype=float)
    fits = tuple(fit_marginal_batch(fam, X, v, max_iter=max_iter)
                 for (fam, _), v in zip(spec, (S, M, Y)))
    Z, clamps = score_matrix_batch(spec, fits, S, M, Y, X)
    scatter = np.einsum("bni,bnj->bij", Z, Z)
    dag = fit_dag_scatter(scatter, S.shape[1], rho=rho, estimate_rho=estimate_rho)
    return FitBatch(spec, fits, dag, clamps, S.shape[1])


# ---------------------------------------------------------------------------
# single-dataset API
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: GsemModel
    stage1_loglik: tuple
    stage2_loglik: float
    iterations: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)
    clamp_count: int = 0
    grad_norm: float = 0.0

    @property
    def all_converged(self):
        return all(self.converged.values())

    def to_dict(self):
        return {"model": self.model.to_dict(), "stage1_loglik": list(self.stage1_loglik),
                "stage2_loglik": self.stage2_loglik, "iterations": self.iterations,
                "converged": self.converged, "clamp_count": self.clamp_count,
                "stage2_grad_norm": self.grad_norm}


def fit_result_from_batch(fb, b=0):
    return FitResult(
        model=fb.model(b),
        stage1_loglik=tuple(float(m.loglik[b]) for m in fb.marginals),
        stage2_loglik=float(fb.dag.loglik[b]),
        iterations={**{k: int(m.iterations[b]) for k, m in zip("SMY", fb.marginals)},
                    "dag": int(fb.dag.iterations[b])},
        converged={**{k: bool(m.converged[b]) for k, m in zip("SMY", fb.marginals)},
                   "dag": bool(fb.dag.converged[b])},
        clamp_count=int(fb.clamp_count[b]),
        grad_norm=float(fb.dag.grad_norm[b]),
    )


def fit_dag(data, marginals, rho=0.0, estimate_rho=False):
    """Stage 2 for fixed marginals; returns ``(DagParams, copula log-likelihood)``."""
    model = GsemModel(*marginals)
    Z, _ = model.scores(data)
    res = fit_dag_scatter((Z.T @ Z)[None], data.n, rho=rho, estimate_rho=estimate_rho)
    if not res.converged[0]:
        raise ConvergenceError(f"DAG optimizer did not converge (gradient norm {res.grad_norm[0]:.3e})")
    return res.dag(0), float(res.loglik[0])


def fit(data, spec=None, rho=0.0, estimate_rho=False, max_iter=100):
    """Two-stage maximum-likelihood fit of a ``Dataset``."""
    check_dataset(data)
    check_full_rank(data.X)
    fb = fit_batch(spec, data.S[None], data.M[None], data.Y[None], data.X[None],
                   rho=rho, estimate_rho=estimate_rho, max_iter=max_iter)
    res = fit_result_from_batch(fb)
    if not res.all_converged:
        failed = [k for k, v in res.converged.items() if not v]
        raise ConvergenceError(f"fit did not converge for {failed} (stage-2 gradient norm {res.grad_norm:.3e})")
    return res


class GsemMediation(BaseEstimator):
    """Generalized SEM estimator for quantile mediation.

    ``fit(X, y)`` takes the confounder matrix ``X`` (intercept column first)
    and ``y`` with columns ``(S, M, Y)``.

    Parameters
    ----------
    family_s, family_m, family_y : {'normal', 'exponential', 'gamma'}
        Conditional marginal families (canonical links).
    rho : float
        Fixed mediator/outcome error correlation used in stage 2.
    estimate_rho : bool
        Estimate ``rho`` jointly with the DAG coefficients instead.
    max_iter : int
        Iteration cap for the marginal GLM solvers.
    """

    def __init__(self, family_s="normal", family_m="normal", family_y="normal",
                 rho=0.0, estimate_rho=False, max_iter=100):
        self.family_s = family_s
        self.family_m = family_m
        self.family_y = family_y
        self.rho = rho
        self.estimate_rho = estimate_rho
        self.max_iter = max_iter

    @property
    def spec_(self):
        return normalize_spec((self.family_s, self.family_m, self.family_y))

    def fit(self, X, y):
        data = Dataset.from_xy(X, y)
        self.fit_result_ = fit(data, self.spec_, rho=self.rho,
                               estimate_rho=self.estimate_rho, max_iter=self.max_iter)
        self.model_ = self.fit_result_.model
        self.dag_ = self.model_.dag
        self.n_features_in_ = data.p
        return self

    def normal_scores(self, X, y):
        check_is_fitted(self, "model_")
        Z, _ = self.model_.scores(Dataset.from_xy(X, y))
        return Z

    def score(self, X, y):
        """Mean joint log-likelihood per row."""
        check_is_fitted(self, "model_")
        data = Dataset.from_xy(X, y)
        return joint_log_likelihood(self.model_, data) / data.n

    def effects(self, tau, s, s_prime, x):
        from .estimands import EstimandQuery, effects
        check_is_fitted(self, "model_")
        return effects(self.model_, EstimandQuery(tau, s, s_prime, x))

    def sample(self, X, random_state=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        data = self.model_.sample(X, np.random.default_rng(random_state))
        return data.y


__all__ = ["fit", "fit_dag", "fit_batch", "FitResult", "FitBatch", "GsemMediation",
           "normalize_spec", "bfgs_batch", "fit_dag_scatter", "check_gsem_xy"]
