"""Least-squares kernels shared by the C-WLS solver and the reference estimators.

Two problems recur once the integers are fixed:

* unit-norm least squares ``min ||B r - z||`` subject to ``||r|| = 1``
  (single baseline), solved exactly through the secular equation of the
  equality-constrained trust-region problem;
* least squares over rotations parameterized by yaw/pitch/roll
  (multi-baseline), solved by Gauss-Newton with step halving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def unit_norm_lstsq(M, g, tol=1e-15, max_iter=100, eig=None):
    """Minimize ``r^T M r - 2 g^T r`` over unit vectors.

    ``M`` is a symmetric positive semidefinite ``(n, n)`` matrix shared by all
    problems and ``g`` holds one linear term per row, shape ``(m, n)``. This is
    ``||B r - z||^2`` up to a constant with ``M = B^T B`` and ``g = B^T z``.
    Returns unit vectors of shape ``(m, n)``.

    The solution is ``r = (M - nu I)^-1 g`` with the multiplier ``nu`` below
    the smallest eigenvalue ``mu_0``. Writing ``t = mu_0 - nu`` and
    ``c = V^T g`` in the eigenbasis, ``t`` is the root of
    ``sum_j c_j^2 / (mu_j - mu_0 + t)^2 = 1`` in ``[|c_0|, ||c||]``, found by
    Newton on ``1/sqrt(.) - 1`` with bisection safeguarding. ``eig`` may
    pass a precomputed ``np.linalg.eigh(M)``.
    """
    M = np.asarray(M, dtype=float)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    mu, V = np.linalg.eigh(M) if eig is None else eig
    gap = mu - mu[0]
    c = g @ V
    c2 = c * c
    cnorm = np.sqrt(np.sum(c2, axis=1))
    lo = np.abs(c[:, 0])
    hi = cnorm.copy()

    # hard case: g orthogonal to the bottom eigenvector and the other
    # components alone cannot reach the sphere
    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = np.sum(np.where(gap[1:] > 0, c2[:, 1:] / gap[1:] ** 2, np.inf), axis=1)
    hard = (lo <= 1e-13 * np.maximum(cnorm, 1e-300)) & (f0 < 1.0) & np.all(gap[1:] > 0)

    t = lo.copy()
    done = hard | (cnorm == 0)
    eps4 = 4 * np.finfo(float).eps
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(max_iter):
            if done.all():
                break
            inv = 1.0 / (gap + t[:, None])
            w = c2 * inv * inv
            f = np.sum(w, axis=1)
            fp = -2.0 * np.sum(w * inv, axis=1)
            h = 1.0 / np.sqrt(f) - 1.0
            step = h / (0.5 * f**-1.5 * fp)
            # root bracket update: h increases with t
            lo = np.where(h < 0, t, lo)
            hi = np.where(h > 0, t, hi)
            tn = t + step
            bad = ~np.isfinite(tn) | (tn <= lo) | (tn >= hi)
            tn = np.where(bad, 0.5 * (lo + hi), tn)
            conv = (np.abs(h) <= tol) | (hi - lo <= eps4 * np.maximum(hi, 1e-300))
            t = np.where(done | conv, t, tn)
            done |= conv

    with np.errstate(divide="ignore", invalid="ignore"):
        y = c / (gap + t[:, None])
    if np.any(hard):
        yh = np.zeros((int(hard.sum()), len(mu)))
        yh[:, 1:] = c[hard, 1:] / gap[1:]
        yh[:, 0] = np.sqrt(np.maximum(0.0, 1.0 - f0[hard]))
        y[hard] = yh
    zero = cnorm == 0
    if np.any(zero):
        y[zero] = 0.0
        y[zero, 0] = 1.0
    y[~np.isfinite(y).all(axis=1)] = np.eye(len(mu))[0]
    r = y @ V.T
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def rotation_stack(angles):
    """Rotations for many yaw/pitch/roll triples, shape ``(n, 3, 3)``."""
    a = np.atleast_2d(angles)
    ca, sa = np.cos(a[:, 0]), np.sin(a[:, 0])
    cb, sb = np.cos(a[:, 1]), np.sin(a[:, 1])
    cg, sg = np.cos(a[:, 2]), np.sin(a[:, 2])
    R = np.empty((len(a), 3, 3))
    R[:, 0, 0] = ca * cb
    R[:, 0, 1] = ca * sb * sg - sa * cg
    R[:, 0, 2] = ca * sb * cg + sa * sg
    R[:, 1, 0] = sa * cb
    R[:, 1, 1] = sa * sb * sg + ca * cg
    R[:, 1, 2] = sa * sb * cg - ca * sg
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sg
    R[:, 2, 2] = cb * cg
    return R


def rotation_derivative_stack(angles):
    """Derivatives of :func:`rotation_stack`, shape ``(n, 3, 3, 3)`` as (triple, angle, row, col)."""
    a = np.atleast_2d(angles)
    ca, sa = np.cos(a[:, 0]), np.sin(a[:, 0])
    cb, sb = np.cos(a[:, 1]), np.sin(a[:, 1])
    cg, sg = np.cos(a[:, 2]), np.sin(a[:, 2])
    d = np.zeros((len(a), 3, 3, 3))
    d[:, 0, 0, 0] = -sa * cb
    d[:, 0, 0, 1] = -sa * sb * sg - ca * cg
    d[:, 0, 0, 2] = -sa * sb * cg + ca * sg
    d[:, 0, 1, 0] = ca * cb
    d[:, 0, 1, 1] = ca * sb * sg - sa * cg
    d[:, 0, 1, 2] = ca * sb * cg + sa * sg
    d[:, 1, 0, 0] = -ca * sb
    d[:, 1, 0, 1] = ca * cb * sg
    d[:, 1, 0, 2] = ca * cb * cg
    d[:, 1, 1, 0] = -sa * sb
    d[:, 1, 1, 1] = sa * cb * sg
    d[:, 1, 1, 2] = sa * cb * cg
    d[:, 1, 2, 0] = -cb
    d[:, 1, 2, 1] = -sb * sg
    d[:, 1, 2, 2] = -sb * cg
    d[:, 2, 0, 1] = ca * sb * cg + sa * sg
    d[:, 2, 0, 2] = -ca * sb * sg + sa * cg
    d[:, 2, 1, 1] = sa * sb * cg - ca * sg
    d[:, 2, 1, 2] = -sa * sb * sg - ca * cg
    d[:, 2, 2, 1] = cb * cg
    d[:, 2, 2, 2] = -cb * sg
    return d


def vec_columns(R, q):
    """``vec`` of the first ``q`` columns of stacked rotations, shape ``(n, 3q)``."""
    return np.ascontiguousarray(R[:, :, :q].transpose(0, 2, 1)).reshape(len(R), 3 * q)


def euler_gauss_newton_batch(B, Z, angles0, q, max_iter=50, step_tol=1e-12, max_halvings=30):
    """Row-wise :func:`euler_gauss_newton` for targets ``Z`` of shape ``(n, m)``.

    Returns ``(angles, cost, iterations, converged)`` arrays.
    """
    B = np.asarray(B, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    x = np.atleast_2d(np.asarray(angles0, dtype=float)).copy()
    n = len(x)

    def residual(ang, rows):
        return Z[rows] - vec_columns(rotation_stack(ang), q) @ B.T

    e = residual(x, slice(None))
    cost = np.einsum("ij,ij->i", e, e)
    iters = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        iters[idx] += 1
        D = rotation_derivative_stack(x[idx])[:, :, :, :q]          # (k, 3 angles, 3, q)
        Dv = D.transpose(0, 1, 3, 2).reshape(len(idx), 3, 3 * q)   # vec per angle
        J = -np.einsum("mk,njk->nmj", B, Dv)
        JtJ = np.einsum("nmi,nmj->nij", J, J)
        Jte = np.einsum("nmi,nm->ni", J, e[idx])
        # tiny damping keeps gimbal-lock steps finite
        JtJ += 1e-13 * np.trace(JtJ, axis1=1, axis2=2)[:, None, None] * np.eye(3)
        step = -np.linalg.solve(JtJ, Jte[..., None])[..., 0]
        # linearized decrease at rounding level: nothing left to gain
        gain = -np.einsum("ni,ni->n", Jte, step)
        tiny = (np.linalg.norm(step, axis=1) < step_tol) | (gain <= 1e-14 * cost[idx])
        if np.any(tiny):
            converged[idx[tiny]] = True
            active[idx[tiny]] = False
            keep = ~tiny
            idx, step = idx[keep], step[keep]
            if len(idx) == 0:
                break
        alpha = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        xn = x[idx].copy()
        en = e[idx].copy()
        cn = cost[idx].copy()
        for _ in range(max_halvings):
            p = np.flatnonzero(pending)
            if len(p) == 0:
                break
            trial = x[idx[p]] + alpha[p, None] * step[p]
            et = residual(trial, idx[p])
            ct = np.einsum("ij,ij->i", et, et)
            ok = ct <= cost[idx[p]]
            acc = p[ok]
            xn[acc], en[acc], cn[acc] = trial[ok], et[ok], ct[ok]
            pending[acc] = False
            alpha[p[~ok]] *= 0.5
        stuck = pending
        moved = alpha * np.linalg.norm(step, axis=1)
        x[idx], e[idx], cost[idx] = xn, en, cn
        done = stuck | (moved < step_tol)
        converged[idx[done]] = True
        active[idx[done]] = False
    return x, cost, iters, converged


@dataclass
class GaussNewtonResult:
    angles: np.ndarray
    cost: float
    iterations: int
    converged: bool


def euler_gauss_newton(B, z, angles0, q, **kw):
    """Minimize ``||z - B vec(R_q(angles))||^2`` over yaw/pitch/roll.

    Each Gauss-Newton step is halved until the cost does not increase.
    Converges when the accepted step norm drops below ``step_tol`` or no
    halving decreases the cost.
    """
    x, c, it, conv = euler_gauss_newton_batch(B, np.atleast_2d(z), np.atleast_2d(angles0), q, **kw)
    return GaussNewtonResult(x[0], float(c[0]), int(it[0]), bool(conv[0]))


def rotation_block(angles, q):
    return rotation_stack(angles)[0, :, :q]


def rotation_jacobian(angles, q):
    """``d vec(R_q) / d(yaw, pitch, roll)``, shape ``(3q, 3)``."""
    D = rotation_derivative_stack(angles)[0, :, :, :q]
    return D.transpose(0, 2, 1).reshape(3, 3 * q).T
