"""Reference estimators: oracle, brute-force constrained ILS and grid search.

The oracle knows the true integers, the brute-force C-ILS enumerates every
integer matrix in a box and the AFM grid search scans attitude angles. All
three reuse the fixed-integer least-squares kernels of the C-WLS solver so
that comparisons isolate how the integers are handled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import BoxTooLarge
from .lsq import euler_gauss_newton, rotation_block, unit_norm_lstsq
from .obs_model import ArrayGeometry, Attitude, DdEpoch, direction_to_euler, rotation_to_euler
from .objective import WeightedModel, vec
from .solver import SolveReport, _refine_batch, _refine_rotation, _single_report, wahba_orthogonalize

ENUMERATION_BUDGET = 10**7

# rotations by pi about each body axis, used as extra multi-start seeds
_FLIPS = (np.eye(3), np.diag([1.0, -1.0, -1.0]), np.diag([-1.0, 1.0, -1.0]), np.diag([-1.0, -1.0, 1.0]))


# --------------------------------------------------------------------------
# fixed-integer constrained least squares
# --------------------------------------------------------------------------

def _start_rotation(B, z, q):
    """Unconstrained LS fit projected onto the rotations."""
    v = np.linalg.lstsq(B, z, rcond=None)[0]
    R = v.reshape(3, q, order="F")
    if q == 2:
        n = np.cross(R[:, 0], R[:, 1])
        R = np.column_stack([R, n / max(np.linalg.norm(n), 1e-300)])
    return wahba_orthogonalize(R)


def fixed_integer_fit(model: WeightedModel, cell, starts=None):
    """Constrained LS over rotations for fixed integers.

    ``cell`` holds integers relative to ``model.psi_int``. Returns
    ``(R, cost, converged)``; for ``q = 1`` the solve is exact.
    """
    z = model.target(cell)
    q = model.q
    if q == 1:
        r = unit_norm_lstsq(model.BtB, (z @ model.B)[None, :])[0]
        e = z - model.B @ r
        return r.reshape(3, 1), float(e @ e), True
    if starts is None:
        R0 = _start_rotation(model.B, z, q)
        starts = [R0 @ F for F in _FLIPS]
    best = None
    for R0 in starts:
        gn = euler_gauss_newton(model.B, z, rotation_to_euler(R0).as_array(), q)
        if best is None or gn.cost < best.cost:
            best = gn
    return rotation_block(best.angles, q), float(best.cost), best.converged


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleInput:
    """Epoch together with its true integers."""

    epoch: DdEpoch
    H: np.ndarray
    geometry: ArrayGeometry
    n_true: np.ndarray

    @property
    def unambiguous_phase(self):
        return self.epoch.psi - self.n_true


@dataclass(frozen=True)
class OracleResult:
    rotation: np.ndarray
    attitude: Attitude
    cost: float
    converged: bool


def oracle_solver(inp: OracleInput, mode="phase_and_code", weighting="full", starts=None) -> OracleResult:
    """Constrained weighted LS on the unambiguous phase (and code)."""
    model = WeightedModel(inp.epoch, inp.H, inp.geometry.xb, mode, weighting)
    cell = vec(np.asarray(inp.n_true)) - model.psi_int
    R, cost, conv = fixed_integer_fit(model, cell, starts)
    att = direction_to_euler(R[:, 0]) if model.q == 1 else rotation_to_euler(R)
    return OracleResult(R, att, cost, conv)


# --------------------------------------------------------------------------
# brute-force constrained integer least squares
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CilsResult:
    """Global minimum over an integer box.

    ``exhaustive`` certifies that every integer matrix able to beat the
    returned cost lies inside the box, i.e. the minimum is global.
    """

    rotation: np.ndarray
    ambiguities: np.ndarray
    cost: float
    exhaustive: bool
    n_enumerated: int


def _box_offsets(n_entries, box, chunk):
    side = np.arange(-box, box + 1)
    it = itertools.product(side, repeat=n_entries)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            return
        yield block.reshape(-1, n_entries)


def brute_force_cils(epoch: DdEpoch, H, geometry: ArrayGeometry, box=3, R_init=None,
                     mode="phase_and_code", weighting="full", chunk=65536) -> CilsResult:
    """Enumerate integer matrices in a box and solve the constrained LS for each.

    The box is centered at ``round(Psi - H R_init X_b)``, or at
    ``round(Psi)`` without an initial rotation. Candidates tie-break by
    enumeration order, which is lexicographic in the offsets.
    """
    model = WeightedModel(epoch, H, geometry.xb, mode, weighting)
    n = model.psi_frac.size
    total = (2 * box + 1) ** n
    if total > ENUMERATION_BUDGET:
        raise BoxTooLarge(f"{total} integer matrices exceed the budget of {ENUMERATION_BUDGET}")
    center = np.zeros(n, dtype=np.int64) if R_init is None else model.cell(model.predict(R_init))
    best_cost, best_cell, best_R = np.inf, None, None
    if model.q == 1:
        M, B = model.BtB, model.B
        for off in _box_offsets(n, box, chunk):
            cells = center + off
            z = model.target(cells)
            r = unit_norm_lstsq(M, z @ B)
            e = z - r @ B.T
            c = np.sum(e * e, axis=1)
            i = int(np.argmin(c))
            if c[i] < best_cost:
                best_cost, best_cell, best_R = float(c[i]), cells[i], r[i].reshape(3, 1)
    else:
        for off in _box_offsets(n, box, chunk):
            for cell in center + off:
                R, c, _ = fixed_integer_fit(model, cell)
                if c < best_cost:
                    best_cost, best_cell, best_R = c, cell, R
    # any integer that could beat best_cost stays within reach + sqrt(cost * Q_kk)
    reach = np.kron(geometry.lengths, np.linalg.norm(model.H, axis=1))
    slack = reach + np.sqrt(best_cost * np.diag(epoch.q_psi))
    lo = np.ceil(model.psi_frac - slack)
    hi = np.floor(model.psi_frac + slack)
    exhaustive = bool(np.all(lo >= center - box) and np.all(hi <= center + box))
    amb = (best_cell + model.psi_int.astype(np.int64)).reshape(model.shape, order="F")
    return CilsResult(best_R, amb, best_cost, exhaustive, total)


# --------------------------------------------------------------------------
# ambiguity function method (grid search)
# --------------------------------------------------------------------------

def afm_grid(step):
    """Yaw/roll samples in (-pi, pi] and pitch samples in [-pi/2, pi/2]."""
    n_yaw = int(round(2 * np.pi / step))
    n_pitch = int(round(np.pi / step)) + 1
    yaw = -np.pi + 2 * np.pi * np.arange(1, n_yaw + 1) / n_yaw
    pitch = -np.pi / 2 + np.pi * np.arange(n_pitch) / (n_pitch - 1)
    return yaw, pitch


def afm_grid_search(epoch: DdEpoch, H, geometry: ArrayGeometry, step=np.deg2rad(2.0),
                    refine=True, weighting="full", max_iter=50, chunk=16384) -> SolveReport:
    """Scan the phase-only wrapped cost on an attitude grid.

    The grid argmin is refined with the phase-only unwrap loop when
    ``refine`` is set. ``pool_sizes`` reports the number of grid points.
    """
    if not step > 0:
        raise ValueError("grid step must be positive")
    model = WeightedModel(epoch, H, geometry.xb, "phase_only", weighting)
    yaw, pitch = afm_grid(step)
    q = model.q
    if q == 1:
        Y, P = np.meshgrid(yaw, pitch, indexing="ij")
        Y, P = Y.ravel(), P.ravel()
        dirs = np.column_stack([np.cos(Y) * np.cos(P), np.sin(Y) * np.cos(P), -np.sin(P)])
        cost = model.wrapped_cost_pred(model.predict_many(dirs))
        i = int(np.argmin(cost))
        n_grid = len(cost)
        r0 = dirs[i]
        if refine:
            r, c, cells, it, conv, hist = _refine_batch(model, r0, max_iter)
            rep = _single_report(model, r[0], c[0], cells[0], it[0], conv[0], hist[0], None, method="afm")
        else:
            r = r0
            rep = _single_report(model, r, cost[i], model.cell(model.predict_many(r[None]))[0],
                                 0, False, (cost[i],), None, method="afm")
        return _with_grid(rep, n_grid)
    roll = yaw
    best_c, best_angles = np.inf, None
    angles = np.stack(np.meshgrid(yaw, pitch, roll, indexing="ij"), axis=-1).reshape(-1, 3)
    for start in range(0, len(angles), chunk):
        a = angles[start:start + chunk]
        vecR = _rotation_columns(a, q)
        cost = model.wrapped_cost_pred(model.predict_many(vecR))
        i = int(np.argmin(cost))
        if cost[i] < best_c:
            best_c, best_angles = float(cost[i]), a[i]
    R0 = rotation_block(best_angles, 3)
    if refine:
        R, c, it, conv, hist = _refine_rotation(model, R0, max_iter)
    else:
        R, c, it, conv, hist = R0[:, :q], best_c, 0, False, [best_c]
    rep = SolveReport(
        attitude=rotation_to_euler(R), rotation=R, ambiguities=model.ambiguities(R), cost=float(c),
        converged=bool(conv), iterations=int(it), method="afm", history=tuple(hist),
    )
    return _with_grid(rep, len(angles))


def _with_grid(rep, n_grid):
    return replace(rep, pool_sizes=(n_grid,))


def _rotation_columns(angles, q):
    """``vec`` of the first ``q`` rotation columns for many angle triples."""
    ca, sa = np.cos(angles[:, 0]), np.sin(angles[:, 0])
    cb, sb = np.cos(angles[:, 1]), np.sin(angles[:, 1])
    cg, sg = np.cos(angles[:, 2]), np.sin(angles[:, 2])
    cols = [
        np.column_stack([ca * cb, sa * cb, -sb]),
        np.column_stack([ca * sb * sg - sa * cg, sa * sb * sg + ca * cg, cb * sg]),
        np.column_stack([ca * sb * cg + sa * sg, sa * sb * cg - ca * sg, cb * cg]),
    ]
    return np.concatenate(cols[:q], axis=1)

