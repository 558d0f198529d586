"""Path regressions for the product-of-coefficients and joint-significance tests.

Quantile regression is solved as the bounded dual LP with a Mehrotra
predictor-corrector interior point method (the Frisch-Newton scheme), batched
over a leading axis so a whole bootstrap is one call.
"""
from __future__ import annotations

import numpy as np
from scipy import special

_BETA = 0.99995


def _step_bound(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.min(ratio, axis=-1)


def _spd_solve(Q, rhs):
    try:
        return np.linalg.solve(Q, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.einsum("bij,bj->bi", np.linalg.pinv(Q), rhs)


def rq_batch(X, y, tau=0.5, tol=1e-9, max_iter=100):
    """Linear quantile regression of ``y`` on ``X`` for each batch row.

    ``X`` is ``(B, n, p)``, ``y`` is ``(B, n)``. Returns ``(coef, converged)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    B, n, p = X.shape
    c = -y
    b = (1.0 - tau) * X.sum(axis=1)
    x = np.full((B, n), 1.0 - tau)
    s = 1.0 - x
    XtX = np.einsum("bni,bnj->bij", X, X)
    dual = _spd_solve(XtX, np.einsum("bni,bn->bi", X, c))
    r = c - np.einsum("bni,bi->bn", X, dual)
    r = r + 0.001 * (r == 0)
    z = np.where(r > 0, r, 0.0)
    w = z - r
    scale = 1.0 + np.abs(y).sum(axis=1)

    def gap_of(x, dual, w):
        return (np.einsum("bn,bn->b", c, x) - np.einsum("bi,bi->b", b, dual) + w.sum(axis=1))

    gap = gap_of(x, dual, w)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            act = gap > tol * scale
            if not act.any():
                break
            x, s, dual, w, z = _fn_step(X, b, c, x, s, dual, w, z, act, n)
            gap = gap_of(x, dual, w)
    ok = np.isfinite(dual).all(axis=1) & (gap <= tol * scale)
    return -dual, ok


def _fn_step(X, b, c, x, s, dual, w, z, act, n):
    """One predictor-corrector step; rows outside ``act`` are left as is."""
    q = 1.0 / (z / x + w / s)
    r = z - w
    Q = np.einsum("bni,bn,bnj->bij", X, q, X)
    Q = np.where(act[:, None, None] & np.isfinite(Q).all(axis=(1, 2), keepdims=True), Q, np.eye(Q.shape[1]))
    # Predictor (affine scaling) direction.
    dy = _spd_solve(Q, np.einsum("bni,bn->bi", X, q * r))
    dx = q * (np.einsum("bni,bi->bn", X, dy) - r)
    ds = -dx
    dz = -z * (dx / x + 1.0)
    dw = -w * (ds / s + 1.0)
    fp = np.minimum(_BETA * np.minimum(_step_bound(x, dx), _step_bound(s, ds)), 1.0)
    fd = np.minimum(_BETA * np.minimum(_step_bound(w, dw), _step_bound(z, dz)), 1.0)
    need = np.minimum(fp, fd) < 1.0
    if need.any():
        # Corrector with centering; rows taking the full affine step keep it.
        mu = np.einsum("bn,bn->b", z, x) + np.einsum("bn,bn->b", w, s)
        g = (np.einsum("bn,bn->b", z + fd[:, None] * dz, x + fp[:, None] * dx)
             + np.einsum("bn,bn->b", w + fd[:, None] * dw, s + fp[:, None] * ds))
        mu = (mu * (g / mu) ** 3 / (2.0 * n))[:, None]
        dxdz = dx * dz
        dsdw = ds * dw
        v = mu * (1.0 / x - 1.0 / s) - r - dxdz / x + dsdw / s
        dy2 = -_spd_solve(Q, np.einsum("bni,bn->bi", X, q * v))
        dx2 = q * (np.einsum("bni,bi->bn", X, dy2) + v)
        ds2 = -dx2
        dz2 = mu / x - z - (z / x) * dx2 - dxdz / x
        dw2 = mu / s - w - (w / s) * ds2 - dsdw / s
        fp2 = np.minimum(_BETA * np.minimum(_step_bound(x, dx2), _step_bound(s, ds2)), 1.0)
        fd2 = np.minimum(_BETA * np.minimum(_step_bound(w, dw2), _step_bound(z, dz2)), 1.0)
        sel = need[:, None]
        dx, ds, dz, dw = (np.where(sel, a2, a1) for a1, a2 in
                          ((dx, dx2), (ds, ds2), (dz, dz2), (dw, dw2)))
        dy = np.where(sel, dy2, dy)
        fp = np.where(need, fp2, fp)
        fd = np.where(need, fd2, fd)
    # Converged rows may hold inf/nan directions; never let them leak in.
    keep = act & np.isfinite(fp) & np.isfinite(fd) & np.isfinite(dy).all(axis=1)
    fp, fd = fp[:, None], fd[:, None]
    row = keep[:, None]
    return (np.where(row, x + fp * dx, x), np.where(row, s + fp * ds, s),
            np.where(row, dual + fd * dy, dual), np.where(row, w + fd * dw, w),
            np.where(row, z + fd * dz, z))


def hall_sheather(n, tau, alpha=0.05):
    """Hall-Sheather bandwidth for sparsity estimation."""
    z = special.ndtri(tau)
    num = 1.5 * np.exp(-z ** 2) / (2 * np.pi)
    h = n ** (-1.0 / 3) * special.ndtri(1 - alpha / 2) ** (2.0 / 3) * (num / (2 * z ** 2 + 1)) ** (1.0 / 3)
    return h


def rq_se_batch(X, y, coef, tau):
    """iid-error standard errors ``tau(1-tau) s^2 (X'X)^{-1}`` with a
    difference-quotient sparsity estimate."""
    B, n, p = X.shape
    resid = y - np.einsum("bni,bi->bn", X, coef)
    h = hall_sheather(n, tau)
    lo, hi = max(tau - h, 1e-3), min(tau + h, 1 - 1e-3)
    qs = np.quantile(resid, [lo, hi], axis=1)
    sparsity = (qs[1] - qs[0]) / (hi - lo)
    inv = np.linalg.inv(np.einsum("bni,bnj->bij", X, X))
    var = tau * (1 - tau) * sparsity[:, None] ** 2 * np.diagonal(inv, axis1=1, axis2=2)
    return np.sqrt(var)


def path_coefficients(S, M, Y, X, tau, with_se=True):
    """Mediator path ``a`` (median regression of M on X, S) and outcome path
    ``b`` (tau-quantile regression of Y on X, S, M), batched.

    Returns ``(a, se_a, b, se_b, converged)``; standard errors are ``None``
    when ``with_se`` is false.
    """
    Xa = np.concatenate([X, S[..., None]], axis=2)
    ca, ok_a = rq_batch(Xa, M, 0.5)
    Xb = np.concatenate([X, S[..., None], M[..., None]], axis=2)
    cb, ok = rq_batch(Xb, Y, tau)
    ok = ok & ok_a
    a, b = ca[:, -1], cb[:, -1]
    if not with_se:
        return a, None, b, None, ok
    sa = rq_se_batch(Xa, M, ca, 0.5)
    sb = rq_se_batch(Xb, Y, cb, tau)
    return a, sa[:, -1], b, sb[:, -1], ok
