"""The generalized structural equation model.

A Gaussian copula glues three GLM marginals (exposure S, mediator M,
outcome Y, each conditional on confounders X) together; the copula
correlation matrix is induced by the weighted adjacency matrix of the
DAG ``S -> M -> Y``, ``S -> Y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import marginals as mg
from ._validation import Dataset


class DegenerateCorrelationError(ValueError):
    """The copula correlation matrix is not positive definite."""


class OutOfSupportError(ValueError):
    """A value lies outside the support of its conditional marginal."""


@dataclass(frozen=True)
class DagParams:
    """Structural coefficients on the latent normal scale.

    ``rho`` is the correlation between the mediator and outcome errors; it is
    zero under sequential ignorability and only varied in sensitivity runs.
    """

    alpha_S: float = 0.0
    beta_M: float = 0.0
    gamma_S: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        for name in ("alpha_S", "beta_M", "gamma_S", "rho"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie in (-1, 1)")

    @property
    def eta(self):
        return self.alpha_S * self.beta_M + self.gamma_S

    @property
    def delta_M(self):
        return float(np.sqrt(self.alpha_S ** 2 + 1.0))

    @property
    def delta_Y(self):
        return float(delta_y(self.alpha_S, self.beta_M, self.gamma_S, self.rho))

    def to_dict(self):
        return {"alpha_S": self.alpha_S, "beta_M": self.beta_M,
                "gamma_S": self.gamma_S, "rho": self.rho}


def delta_y(alpha, beta, gamma, rho=0.0):
    eta = alpha * beta + gamma
    return np.sqrt(eta ** 2 + beta ** 2 + 1.0 + 2.0 * beta * rho)


def adjacency(dag):
    """Weighted adjacency matrix, rows/columns ordered (S, M, Y)."""
    theta = np.zeros((3, 3))
    theta[1, 0] = dag.alpha_S
    theta[2, 0] = dag.gamma_S
    theta[2, 1] = dag.beta_M
    return theta


def correlation_entries(alpha, beta, gamma, rho=0.0):
    """Off-diagonal entries ``(r_SM, r_SY, r_MY)``; broadcasts over arrays."""
    eta = alpha * beta + gamma
    d_m = np.sqrt(alpha ** 2 + 1.0)
    d_y = delta_y(alpha, beta, gamma, rho)
    return alpha / d_m, eta / d_y, (alpha * eta + beta + rho) / (d_m * d_y)


def correlation_matrices(alpha, beta, gamma, rho=0.0):
    r_sm, r_sy, r_my = np.broadcast_arrays(*correlation_entries(alpha, beta, gamma, rho))
    out = np.empty(r_sm.shape + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = 1.0
    out[..., 0, 1] = out[..., 1, 0] = r_sm
    out[..., 0, 2] = out[..., 2, 0] = r_sy
    out[..., 1, 2] = out[..., 2, 1] = r_my
    return out


def implied_correlation(dag):
    """Copula correlation matrix induced by ``dag``.

    At ``rho = 0`` this is the standardized ``(I - Theta)^{-1}(I - Theta)^{-T}``;
    otherwise the mediator and outcome errors are taken to be correlated.
    """
    R = correlation_matrices(dag.alpha_S, dag.beta_M, dag.gamma_S, dag.rho)
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - unreachable for |rho| < 1
        raise DegenerateCorrelationError(f"implied correlation not positive definite: {dag}") from exc
    return R


def gaussian_copula_log_density(z, R):
    """``log c(u; R)`` written in terms of the normal scores ``z = Phi^{-1}(u)``.

    ``z`` may be a single 3-vector or an ``(n, 3)`` array.
    """
    z = np.asarray(z, dtype=float)
    R = np.asarray(R, dtype=float)
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCorrelationError("copula correlation matrix is singular") from exc
    logdet = 2.0 * np.log(np.diag(L)).sum()
    w = np.linalg.solve(L, z.T)
    quad = np.sum(w * w, axis=0) - np.sum(z * z, axis=-1)
    return -0.5 * logdet - 0.5 * quad


def copula_loglik_from_scatter(R, scatter, n):
    """Summed copula log density of rows whose scatter ``sum z z^T`` is given.

    Broadcasts over leading axes of ``R``/``scatter``; returns ``-inf`` for
    matrices that are not positive definite.
    """
    det = np.linalg.det(R)
    ok = det > 0
    Rs = np.where(ok[..., None, None], R, np.eye(3))
    inv = np.linalg.inv(Rs)
    tr = np.einsum("...ij,...ji->...", inv - np.eye(3), scatter)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -0.5 * n * np.log(np.where(ok, det, 1.0)) - 0.5 * tr
    return np.where(ok, val, -np.inf)


def normal_score(model_S, s, x):
    """``Phi^{-1}(F_S(s | x))``; raises if the cdf is 0 or 1 in floating point."""
    s = np.asarray(s, dtype=float)
    if mg.positive_support(model_S.family) and np.any(s <= 0):
        raise OutOfSupportError(f"exposure value {s} outside the {model_S.family.value} support")
    eta = model_S.eta(x)
    lower = mg.cdf(model_S.family, eta, model_S.phi, s)
    upper = mg.sf(model_S.family, eta, model_S.phi, s)
    if np.any(lower <= 0) or np.any(upper <= 0):
        raise OutOfSupportError(f"cdf of exposure value {s} is 0 or 1 at x={x}")
    z, _ = mg.normal_scores(model_S.family, eta, model_S.phi, s)
    return z if z.ndim else float(z)


@dataclass(frozen=True)
class GsemModel:
    marginal_S: mg.MarginalModel
    marginal_M: mg.MarginalModel
    marginal_Y: mg.MarginalModel
    dag: DagParams = field(default_factory=DagParams)

    @property
    def marginals(self):
        return (self.marginal_S, self.marginal_M, self.marginal_Y)

    def correlation(self):
        return implied_correlation(self.dag)

    def scores(self, data):
        """Normal scores of every row, shape ``(n, 3)``, and the clamp count."""
        cols = (data.S, data.M, data.Y)
        Z = np.empty((data.n, 3))
        clamps = 0
        for j, (m, v) in enumerate(zip(self.marginals, cols)):
            Z[:, j], c = mg.normal_scores(m.family, m.eta(data.X), m.phi, v)
            clamps += int(c.sum())
        return Z, clamps

    def sample(self, X, rng):
        """Draw ``(S, M, Y)`` given confounder rows ``X`` by the structural recursion."""
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        eps = rng.standard_normal((n, 3))
        d = self.dag
        e_m = eps[:, 1]
        e_y = d.rho * eps[:, 1] + np.sqrt(1.0 - d.rho ** 2) * eps[:, 2]
        w_s = eps[:, 0]
        w_m = d.alpha_S * w_s + e_m
        w_y = d.gamma_S * w_s + d.beta_M * w_m + e_y
        z = (w_s, w_m / d.delta_M, w_y / d.delta_Y)
        out = [mg.ppf_of_normal(m.family, m.eta(X), m.phi, zj) for m, zj in zip(self.marginals, z)]
        return Dataset(S=out[0], M=out[1], Y=out[2], X=X)

    def to_dict(self):
        return {"marginal_S": self.marginal_S.to_dict(), "marginal_M": self.marginal_M.to_dict(),
                "marginal_Y": self.marginal_Y.to_dict(), "dag": self.dag.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(mg.MarginalModel.from_dict(d["marginal_S"]),
                   mg.MarginalModel.from_dict(d["marginal_M"]),
                   mg.MarginalModel.from_dict(d["marginal_Y"]),
                   DagParams(**d.get("dag", {})))


def joint_log_likelihood(model, data):
    """Copula term plus the three marginal log densities, summed over rows."""
    total = 0.0
    for name, m, v in zip("SMY", model.marginals, (data.S, data.M, data.Y)):
        if mg.positive_support(m.family):
            bad = np.flatnonzero(v <= 0)
            if bad.size:
                raise OutOfSupportError(f"row {bad[0]}: {name}={v[bad[0]]} outside {m.family.value} support")
        total += float(mg.logpdf(m.family, m.eta(data.X), m.phi, v).sum())
    Z, _ = model.scores(data)
    total += float(gaussian_copula_log_density(Z, model.correlation()).sum())
    return total


__all__ = [
    "DagParams", "GsemModel", "adjacency", "implied_correlation", "correlation_matrices",
    "gaussian_copula_log_density", "copula_loglik_from_scatter", "normal_score",
    "joint_log_likelihood", "DegenerateCorrelationError", "OutOfSupportError", "delta_y",
]
