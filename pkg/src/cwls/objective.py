"""Wrap operator and the constrained wrapped least-squares objective.

Rounding follows the half-integer rule ``round(N + 0.5) = N``, hence
``wrap(x) = x - round(x)`` always lies in the half-open interval (-1/2, 1/2].
numpy's ``round`` (half-to-even) and ``floor(x + 0.5)`` (half-up) both
violate this at the boundary, so neither is used here.
"""

from __future__ import annotations

import functools

import numpy as np

from .obs_model import ArrayGeometry, DdEpoch, DesignMatrix

MODES = ("phase_only", "phase_and_code")
WEIGHTINGS = ("full", "diagonal")


def cycle_round(x):
    """Nearest integer with ties resolved downward (``round(N + 0.5) = N``)."""
    x = np.asarray(x, dtype=float)
    n = np.ceil(x - 0.5)
    r = x - n
    # x - 0.5 can round up to the next integer just above a half-integer
    n += r > 0.5
    n -= r <= -0.5
    return n if n.ndim else float(n)


def wrap(x):
    """Fractional residual ``x - round(x)`` in (-1/2, 1/2]."""
    x = np.asarray(x, dtype=float)
    r = x - cycle_round(x)
    return r if r.ndim else float(r)


def vec(M):
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=float).ravel(order="F")


def _as_h(H):
    return H.H if isinstance(H, DesignMatrix) else np.asarray(H, dtype=float)


def _as_xb(xb):
    return xb.xb if isinstance(xb, ArrayGeometry) else np.atleast_2d(np.asarray(xb, dtype=float))


def _check_mode(mode, weighting):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")


class WeightedModel:
    """Whitened linear map ``vec(R) -> vec(H R X_b)`` for one epoch.

    Everything the solvers evaluate repeatedly is precomputed here: the
    Kronecker design ``kron(X_b^T, H)``, the whitening matrices of the phase
    and code covariances and their products with the design.

    The phase observations are split into an integer part and a fractional
    part ``psi_frac`` in (-1/2, 1/2]; all costs only see the fractional part,
    which makes every solver exactly invariant to integer phase shifts.
    """

    def __init__(self, epoch: DdEpoch, H, xb, mode="phase_and_code", weighting="full"):
        _check_mode(mode, weighting)
        H = _as_h(H)
        xb = _as_xb(xb)
        if xb.shape[1] != epoch.n_baselines or H.shape[0] != epoch.n_dd:
            raise ValueError("epoch, design matrix and X_b dimensions disagree")
        self.epoch = epoch
        self.H = H
        self.xb = xb
        self.q = xb.shape[0]
        self.mode = mode
        self.weighting = weighting
        self.shape = epoch.psi.shape
        psi = vec(epoch.psi)
        self.psi_int = cycle_round(psi)
        self.psi_frac = psi - self.psi_int
        self.rho = vec(epoch.rho)
        self.K = np.kron(xb.T, H)
        self.Wp = epoch.whitener("phase", weighting)
        self.Bp = self.Wp @ self.K
        self.use_code = mode == "phase_and_code"
        if self.use_code:
            self.Wc = epoch.whitener("code", weighting)
            self.Bc = self.Wc @ self.K
            self.zc = self.Wc @ self.rho
            self.B = np.vstack([self.Bp, self.Bc])
        else:
            self.B = self.Bp
        self.BtB = self.B.T @ self.B
        self._rhs_phase = self.Wp.T @ self.Bp
        self._rhs_code = self.zc @ self.Bc if self.use_code else np.zeros(self.B.shape[1])

    # predictions -------------------------------------------------------
    def predict(self, R):
        """``vec(H R X_b)`` for a single 3 x q block."""
        return self.K @ vec(np.reshape(R, (3, self.q), order="F"))

    def predict_many(self, vecR):
        """Predictions for stacked ``vec(R)`` rows, shape ``(n, 3q)``."""
        return np.asarray(vecR) @ self.K.T

    # costs ---------------------------------------------------------------
    def wrapped_cost_pred(self, pred):
        """Wrapped cost for predictions of shape ``(..., A*S)``."""
        pred = np.asarray(pred, dtype=float)
        e = wrap(self.psi_frac - pred) @ self.Wp.T
        cost = np.sum(e * e, axis=-1)
        if self.use_code:
            ec = (self.rho - pred) @ self.Wc.T
            cost = cost + np.sum(ec * ec, axis=-1)
        return cost

    def cost_and_cell(self, pred):
        """:meth:`wrapped_cost_pred` and :meth:`cell` sharing one rounding pass."""
        pred = np.asarray(pred, dtype=float)
        d = self.psi_frac - pred
        n = cycle_round(d)
        e = (d - n) @ self.Wp.T
        cost = np.sum(e * e, axis=-1)
        if self.use_code:
            ec = (self.rho - pred) @ self.Wc.T
            cost = cost + np.sum(ec * ec, axis=-1)
        return cost, n.astype(np.int64)

    def wrapped_cost(self, R):
        return float(self.wrapped_cost_pred(self.predict(R)))

    def cell(self, pred):
        """Integer hypotheses ``round(psi - pred)`` relative to ``psi_int``."""
        return cycle_round(self.psi_frac - np.asarray(pred, dtype=float)).astype(np.int64)

    def ambiguities(self, R):
        """Full integer matrix ``round(Psi - H R X_b)``."""
        n = self.cell(self.predict(R)) + self.psi_int.astype(np.int64)
        return n.reshape(self.shape, order="F")

    def target(self, cell):
        """Whitened observation vector for fixed integers (relative ``cell``)."""
        phi = self.psi_frac - np.asarray(cell, dtype=float)
        zp = phi @ self.Wp.T
        if self.use_code:
            zc = np.broadcast_to(self.zc, zp.shape[:-1] + self.zc.shape)
            return np.concatenate([zp, zc], axis=-1)
        return zp

    def normal_rhs(self, cell):
        """``target(cell) @ B``, the linear term of the fixed-integer normal equations."""
        return (self.psi_frac - np.asarray(cell, dtype=float)) @ self._rhs_phase + self._rhs_code

    @functools.cached_property
    def gram_eigh(self):
        """Eigendecomposition of ``B^T B``, shared by every unit-norm solve."""
        return np.linalg.eigh(self.BtB)

    def fixed_cost(self, R, cell):
        e = self.target(cell) - self.B @ vec(np.reshape(R, (3, self.q), order="F"))
        return float(e @ e)


def cwls_objective(R, epoch: DdEpoch, H, xb, mode="phase_and_code", weighting="full"):
    """C-WLS cost of a rotation (3 x q) or unit baseline direction.

    ``||[wrap(vec(Psi - H R X_b)); vec(P - H R X_b)]||^2`` weighted by the
    inverse covariance; ``mode="phase_only"`` drops the code block.
    """
    return WeightedModel(epoch, H, xb, mode, weighting).wrapped_cost(R)


def ambiguity_from_rotation(R, psi, H, xb):
    """Integer matrix ``round(Psi - H R X_b)`` under the half-integer rule."""
    H = _as_h(H)
    xb = _as_xb(xb)
    R = np.reshape(np.asarray(R, dtype=float), (3, xb.shape[0]), order="F")
    psi = np.asarray(psi, dtype=float).reshape(H.shape[0], xb.shape[1])
    return cycle_round(psi - H @ R @ xb).astype(np.int64)
