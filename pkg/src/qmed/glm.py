"""Maximum-likelihood GLM fits for the conditional marginals.

The solvers take a leading batch axis (``X`` of shape ``(B, n, p)``, ``y`` of
shape ``(B, n)``) so bootstrap refits are one vectorized call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import marginals as mg


class ConvergenceError(RuntimeError):
    pass


class RankDeficientError(ValueError):
    pass


@dataclass
class MarginalFitBatch:
    family: mg.Family
    zeta: np.ndarray        # (B, p)
    phi: np.ndarray         # (B,)
    loglik: np.ndarray      # (B,)
    iterations: np.ndarray  # (B,) int
    converged: np.ndarray   # (B,) bool
    grad_norm: np.ndarray   # (B,)

    def model(self, b=0):
        return mg.MarginalModel(self.family, self.zeta[b], float(self.phi[b]))


def _solve(A, b):
    """Batched SPD solve; rows with a singular system come back as NaN."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(b.shape, np.nan)
        for i in range(A.shape[0]):
            try:
                out[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                pass
        return out


def _gram(X, w=None):
    if w is None:
        return np.einsum("bni,bnj->bij", X, X)
    return np.einsum("bni,bn,bnj->bij", X, w, X)


def _fit_normal(X, y):
    n = X.shape[1]
    zeta = _solve(_gram(X), np.einsum("bni,bn->bi", X, y))
    resid = y - np.einsum("bni,bi->bn", X, zeta)
    phi = np.einsum("bn,bn->b", resid, resid) / n
    ok = np.isfinite(zeta).all(axis=1) & (phi > 0)
    loglik = mg.logpdf(mg.Family.NORMAL, y - resid, phi[:, None], y).sum(axis=1)
    grad = np.einsum("bni,bn->bi", X, resid) / phi[:, None]
    B = X.shape[0]
    return MarginalFitBatch(mg.Family.NORMAL, zeta, phi, loglik, np.ones(B, int), ok,
                            np.linalg.norm(grad, axis=1) / n)


def _newton_loop(X, y, zeta, objective, direction, max_iter, tol):
    """Damped Newton/Fisher iterations maximizing ``objective`` per batch row."""
    B, n, _ = X.shape
    it = np.zeros(B, int)
    done = np.zeros(B, bool)
    f = objective(zeta)
    grad_norm = np.full(B, np.inf)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        step, grad = direction(zeta)
        grad_norm = np.where(act, np.linalg.norm(grad, axis=1) / n, grad_norm)
        t = np.ones(B)
        accepted = np.zeros(B, bool)
        for _ in range(40):
            trial = zeta + t[:, None] * step
            ft = objective(trial)
            good = act & ~accepted & np.isfinite(ft) & (ft >= f - 1e-12 * np.abs(f))
            zeta = np.where(good[:, None], trial, zeta)
            f = np.where(good, ft, f)
            accepted |= good
            pending = act & ~accepted
            if not pending.any():
                break
            t = np.where(pending, t * 0.5, t)
        it += act
        small = np.max(np.abs(t[:, None] * step), axis=1) <= tol * (1.0 + np.max(np.abs(zeta), axis=1))
        done |= act & accepted & (small | (grad_norm < 1e-12))
        done |= act & ~accepted & (grad_norm < 1e-8)
        done &= np.isfinite(zeta).all(axis=1)
    _, grad = direction(zeta)
    grad_norm = np.linalg.norm(grad, axis=1) / n
    return zeta, f, it, done, grad_norm


def _fit_exponential(X, y, max_iter, tol):
    ybar = y.mean(axis=1)
    zeta = np.zeros((X.shape[0], X.shape[2]))
    zeta[:, 0] = -np.log(ybar)

    def objective(z):
        eta = np.einsum("bni,bi->bn", X, z)
        return np.sum(eta - np.exp(eta) * y, axis=1)

    def direction(z):
        eta = np.einsum("bni,bi->bn", X, z)
        w = y * np.exp(eta)
        grad = np.einsum("bni,bn->bi", X, 1.0 - w)
        return _solve(_gram(X, w), grad), grad

    zeta, f, it, conv, gn = _newton_loop(X, y, zeta, objective, direction, max_iter, tol)
    return MarginalFitBatch(mg.Family.EXPONENTIAL, zeta, np.ones(len(zeta)), f, it, conv, gn)


def _gamma_shape(c, iters=60):
    """Solve ``log k - digamma(k) = c`` for the Gamma shape ``k`` (Newton in log k)."""
    c = np.asarray(c, dtype=float)
    k = (3.0 - c + np.sqrt((c - 3.0) ** 2 + 24.0 * c)) / (12.0 * c)
    t = np.log(k)
    for _ in range(iters):
        k = np.exp(t)
        g = t - special.digamma(k) - c
        dg = 1.0 - k * special.polygamma(1, k)
        step = g / dg
        t = t - step
        if np.all(np.abs(step) < 1e-14):
            break
    return np.exp(t)


def _fit_gamma(X, y, max_iter, tol):
    ly = np.log(y)
    zeta = _solve(_gram(X), np.einsum("bni,bn->bi", X, ly))
    mu0 = np.exp(np.einsum("bni,bi->bn", X, zeta))
    zeta[:, 0] += np.log(np.mean(y / mu0, axis=1))
    XtX = _gram(X)

    def objective(z):
        eta = np.einsum("bni,bi->bn", X, z)
        return -np.sum(eta + y * np.exp(-eta), axis=1)

    def direction(z):
        eta = np.einsum("bni,bi->bn", X, z)
        grad = np.einsum("bni,bn->bi", X, y * np.exp(-eta) - 1.0)
        return _solve(XtX, grad), grad

    zeta, _, it, conv, gn = _newton_loop(X, y, zeta, objective, direction, max_iter, tol)
    eta = np.einsum("bni,bi->bn", X, zeta)
    c = -np.mean(ly - eta - y * np.exp(-eta), axis=1) - 1.0
    shape = _gamma_shape(np.maximum(c, 1e-300))
    phi = 1.0 / shape
    loglik = mg.logpdf(mg.Family.GAMMA, eta, phi[:, None], y).sum(axis=1)
    return MarginalFitBatch(mg.Family.GAMMA, zeta, phi, loglik, it, conv & np.isfinite(phi), gn)


def fit_marginal_batch(family, X, y, max_iter=100, tol=1e-10):
    """Fit one marginal family to each of ``B`` stacked datasets."""
    family, _ = mg.check_family_link(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if family is mg.Family.NORMAL:
        return _fit_normal(X, y)
    if np.any(y <= 0):
        raise ValueError(f"{family.value} marginal requires positive responses")
    if family is mg.Family.EXPONENTIAL:
        return _fit_exponential(X, y, max_iter, tol)
    return _fit_gamma(X, y, max_iter, tol)


def check_full_rank(X):
    X = np.asarray(X, dtype=float)
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise RankDeficientError(f"design matrix has rank {rank} < {X.shape[1]} columns")


def fit_marginal(data, role, family, link=None, max_iter=100):
    """Maximum-likelihood fit of the marginal of ``role`` ('S', 'M' or 'Y') given X."""
    family, link = mg.check_family_link(family, link)
    check_full_rank(data.X)
    y = {"S": data.S, "M": data.M, "Y": data.Y}[role]
    res = fit_marginal_batch(family, data.X[None], y[None], max_iter=max_iter)
    if not res.converged[0]:
        raise ConvergenceError(
            f"{family.value} fit for {role} did not converge in {max_iter} iterations "
            f"(gradient norm {res.grad_norm[0]:.3e})")
    return res.model(0)


class GLMMarginal(RegressorMixin, BaseEstimator):
    """A single conditional marginal as a scikit-learn regressor.

    Parameters
    ----------
    family : {'normal', 'exponential', 'gamma'}
    link : {'identity', 'log'} or None
        ``None`` picks the family's canonical choice (identity for Normal,
        log otherwise).
    max_iter : int
        Newton iteration cap.
    """

    def __init__(self, family="normal", link=None, max_iter=100):
        self.family = family
        self.link = link
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        family, _ = mg.check_family_link(self.family, self.link)
        check_full_rank(X)
        res = fit_marginal_batch(family, X[None], y[None], max_iter=self.max_iter)
        if not res.converged[0]:
            raise ConvergenceError(f"no convergence (gradient norm {res.grad_norm[0]:.3e})")
        self.model_ = res.model(0)
        self.coef_ = np.asarray(self.model_.zeta)
        self.dispersion_ = self.model_.phi
        self.loglik_ = float(res.loglik[0])
        self.n_iter_ = int(res.iterations[0])
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.mean(np.asarray(X, dtype=float))

    def cdf(self, X, y):
        check_is_fitted(self, "model_")
        return self.model_.cdf(y, np.asarray(X, dtype=float))

    def quantile(self, X, u):
        check_is_fitted(self, "model_")
        return self.model_.quantile(u, np.asarray(X, dtype=float))

    def score_samples(self, X, y):
        check_is_fitted(self, "model_")
        return self.model_.log_density(y, np.asarray(X, dtype=float))

    def sample(self, X, random_state=None):
        check_is_fitted(self, "model_")
        return self.model_.sample(np.asarray(X, dtype=float), np.random.default_rng(random_state))
