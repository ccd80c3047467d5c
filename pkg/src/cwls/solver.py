"""Constrained wrapped least-squares attitude solver.

Single baseline: circle-pair intersections supply coarse unit directions,
the best ``K`` integer cells are refined by alternating unwrap and
unit-norm least squares, and the lowest wrapped cost wins.

Multiple baselines: per-baseline candidates are combined under the known
inter-baseline angles, assembled into a coarse rotation, projected onto
SO(3) and refined over yaw/pitch/roll with the same unwrap loop.
"""

from __future__ import annotations

import functools
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import circles as _circles
from .errors import EmptyAfterFilter, EmptyCandidatePool, RankDeficientWarning, SingularGram
from .lsq import euler_gauss_newton_batch, rotation_stack, unit_norm_lstsq, vec_columns
from .obs_model import (
    ArrayGeometry,
    Attitude,
    DdEpoch,
    complete_rotation,
    direction_to_euler,
    rotation_to_euler,
)
from .objective import WeightedModel


@dataclass(frozen=True)
class SolverParams:
    """Tuning knobs of the C-WLS solver.

    Attributes:
        K: Integer cells kept after ranking in single-baseline solving.
        K_multi: Integer cells kept per baseline before the angle test in
            multi-baseline solving.
        gap: Per-satellite near-miss threshold on the unit sphere; a circle
            pair uses the root sum of squares of its two thresholds.
            ``None`` derives them from the phase covariance.
        delta_theta: Inter-baseline angle tolerance in radians; ``None``
            derives a per-pair value from the phase covariance.
        mode: ``"phase_and_code"`` or ``"phase_only"``.
        weighting: ``"full"`` (correlated covariance) or ``"diagonal"``.
        refine_candidates: Refine per-baseline candidates before the
            multi-baseline angle test.
        max_starts: Surviving tuples refined in multi-baseline solving,
            cheapest coarse joint cost first.
        max_iter: Cap on unwrap/solve iterations.
        tail_probability: Refined per-baseline candidates costlier than the
            best by more than the chi-square quantile at this tail probability
            are dropped before the angle test; ``None`` keeps all.
    """

    K: int = 8
    K_multi: int = 64
    gap: float | None = None
    delta_theta: float | None = None
    mode: str = "phase_and_code"
    weighting: str = "full"
    refine_candidates: bool = True
    max_starts: int = 16
    max_iter: int = 50
    tail_probability: float | None = 1e-6

    def __post_init__(self):
        if self.K < 1 or self.K_multi < 1:
            raise ValueError("K and K_multi must be at least 1")
        if self.delta_theta is not None and not self.delta_theta > 0:
            raise ValueError("delta_theta must be positive")
        if self.tail_probability is not None and not 0 < self.tail_probability < 1:
            raise ValueError("tail_probability must lie in (0, 1)")


@dataclass(frozen=True)
class CandidateSet:
    """Ranked unit-direction candidates of one baseline, cheapest first.

    ``cells`` are integer hypotheses relative to the rounded phase,
    ``ambiguities`` the absolute integers. ``pool_size`` counts every
    intersection and near-miss point before ranking.
    """

    directions: np.ndarray
    costs: np.ndarray
    sources: np.ndarray
    pairs: np.ndarray
    cells: np.ndarray
    ambiguities: np.ndarray
    pool_size: int
    circles_per_satellite: np.ndarray

    def __len__(self):
        return len(self.costs)


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solve, with per-stage diagnostics."""

    attitude: Attitude
    rotation: np.ndarray
    ambiguities: np.ndarray
    cost: float
    converged: bool
    iterations: int
    method: str = "proposed"
    pool_sizes: tuple = ()
    kept: tuple = ()
    circles_per_satellite: float = float("nan")
    tuples_after_filter: int | None = None
    degraded: bool = False
    history: tuple = field(default=(), repr=False)

    def diagnostics(self):
        return {
            "pool_sizes": list(self.pool_sizes),
            "kept": list(self.kept),
            "circles_per_satellite": self.circles_per_satellite,
            "tuples_after_filter": self.tuples_after_filter,
            "iterations": self.iterations,
            "converged": self.converged,
            "degraded": self.degraded,
        }


# phase sigmas of slack added to the geometric integer range
REACH_SIGMAS = 3.0

MIN_DELTA_THETA = float(np.deg2rad(1.0))
MAX_DELTA_THETA = float(np.deg2rad(3.0))


def default_delta_theta(epoch: DdEpoch, H, geometry: ArrayGeometry):
    """Pairwise angle tolerance: three sigmas of the fixed-integer angle error.

    Each direction's angular spread is bounded by the largest eigenvalue of
    its fixed-integer phase covariance; the tolerance for a pair combines both
    and is clipped to the range from one to three degrees.
    """
    H = np.asarray(getattr(H, "H", H), dtype=float)
    spread = np.empty(geometry.n_baselines)
    for a in range(geometry.n_baselines):
        W = epoch.baseline(a).whitener("phase", "full")
        info = (W @ H).T @ (W @ H)
        spread[a] = np.sqrt(1.0 / np.linalg.eigvalsh(info)[0]) / geometry.lengths[a]
    tol = 3.0 * np.hypot(spread[:, None], spread[None, :])
    return np.clip(tol, MIN_DELTA_THETA, MAX_DELTA_THETA)


def default_gap(q_psi, row_norms, length):
    """Per-satellite near-miss threshold: three phase sigmas on the unit sphere."""
    sigma = np.sqrt(np.diag(q_psi))
    return np.maximum(1e-3, 3.0 * sigma / (length * np.asarray(row_norms)))


# --------------------------------------------------------------------------
# single baseline
# --------------------------------------------------------------------------

def _candidate_points(psi_frac, H, length, gap, margin):
    """All intersection and near-miss points in generation order.

    Integers up to ``margin`` cycles beyond geometric reach are admitted too,
    so that noise pushing the true phase past the reach still yields a
    (clipped) circle. Axis points of point-like circles follow the pair points.
    """
    norms = np.linalg.norm(H, axis=1)
    lo, hi = _circles.circle_bounds(psi_frac, norms, length, margin)
    cosines = [np.clip((psi_frac[s] - np.arange(lo[s], hi[s] + 1)) / (length * norms[s]), -1.0, 1.0)
               for s in range(len(psi_frac))]
    axes = H / norms[:, None]
    gap = np.broadcast_to(np.asarray(gap, dtype=float), (len(axes),))
    # a near-miss distance moves with the noise of both circles
    pts, sources, pairs = _circles.pool_points(axes, cosines, np.hypot(gap[:, None], gap[None, :]))
    ax_pts, ax_src, ax_pairs = _circles.axis_points(axes, cosines, gap)
    return (np.concatenate([pts, ax_pts]), np.concatenate([sources, ax_src]),
            np.concatenate([pairs, ax_pairs]), hi - lo + 1)


def _top_cells(costs, cells, K):
    """Indices of the best-cost representative of the ``K`` cheapest cells."""
    order = np.argsort(costs, kind="stable")
    rows = np.ascontiguousarray(cells[order])
    lo = rows.min(axis=0)
    radix = rows.max(axis=0) - lo + 1
    if np.sum(np.log2(radix.astype(float))) < 62:
        # exact mixed-radix packing of each cell into one integer
        place = np.concatenate([[1], np.cumprod(radix[:-1])])
        keys = (rows - lo) @ place
    else:
        keys = rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))).ravel()
    _, first = np.unique(keys, return_index=True)
    return order[np.sort(first)[:K]]


@functools.lru_cache(maxsize=256)
def _chi2_quantile(tail, dof):
    return float(stats.chi2.isf(tail, dof))


def _single_model(epoch, H, length, params):
    return WeightedModel(epoch, H, [[float(length)]], params.mode, params.weighting)


def _search(model, length, params, K=None):
    H = model.H
    gap = params.gap
    if gap is None:
        gap = default_gap(model.epoch.q_psi, np.linalg.norm(H, axis=1), length)
    margin = REACH_SIGMAS * np.sqrt(np.diag(model.epoch.q_psi))
    pts, sources, pairs, counts = _candidate_points(model.psi_frac, H, length, gap, margin)
    if len(pts) == 0:
        raise EmptyCandidatePool("no circle intersections or near-misses")
    pred = model.predict_many(pts)
    costs, cells = model.cost_and_cell(pred)
    keep = _top_cells(costs, cells, params.K if K is None else K)
    return CandidateSet(
        directions=pts[keep],
        costs=costs[keep],
        sources=sources[keep],
        pairs=pairs[keep],
        cells=cells[keep],
        ambiguities=cells[keep] + model.psi_int.astype(np.int64),
        pool_size=len(pts),
        circles_per_satellite=counts,
    )


def search_candidates_single(epoch: DdEpoch, H, length, params: SolverParams | None = None) -> CandidateSet:
    """Rank circle intersections of one baseline and keep the best ``K`` cells."""
    params = params or SolverParams()
    return _search(_single_model(epoch, H, length, params), length, params)


@dataclass(frozen=True)
class RefineResult:
    direction: np.ndarray
    ambiguities: np.ndarray
    cost: float
    iterations: int
    converged: bool
    history: tuple


def _refine_batch(model, r0, max_iter):
    """Alternate unwrap and unit-norm LS for many starting directions at once.

    A step is accepted only if the wrapped cost does not increase. Rows stop
    when the integer cell reproduces itself (fixed point) or a step is
    rejected; ``converged`` records whether the fixed point was reached.
    """
    r0 = np.atleast_2d(np.asarray(r0, dtype=float))
    n = len(r0)
    best_r = r0 / np.linalg.norm(r0, axis=1, keepdims=True)
    pred = model.predict_many(best_r)
    best_c, cells = model.cost_and_cell(pred)
    iters = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    history = [[c] for c in best_c]
    M, eig = model.BtB, model.gram_eigh
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        r = unit_norm_lstsq(M, model.normal_rhs(cells[idx]), eig=eig)
        pred = model.predict_many(r)
        c, new = model.cost_and_cell(pred)
        same = np.all(new == cells[idx], axis=1)
        ok = c <= best_c[idx]
        acc = idx[ok]
        best_r[acc] = r[ok]
        best_c[acc] = c[ok]
        iters[acc] += 1
        for i, ci in zip(acc, c[ok]):
            history[i].append(ci)
        cells[acc] = new[ok]
        converged[idx[same]] = True
        active[idx[same | ~ok]] = False
    final_cells = model.cell(model.predict_many(best_r))
    return best_r, best_c, final_cells, iters, converged, history


def refine_single(r0, epoch: DdEpoch, H, length, mode="phase_and_code", weighting="full",
                  max_iter=50) -> RefineResult:
    """Refine one unit direction by alternating unwrap and constrained LS."""
    model = WeightedModel(epoch, H, [[float(length)]], mode, weighting)
    r, c, cells, it, conv, hist = _refine_batch(model, r0, max_iter)
    amb = cells[0] + model.psi_int.astype(np.int64)
    return RefineResult(r[0], amb, float(c[0]), int(it[0]), bool(conv[0]), tuple(hist[0]))


def _single_report(model, r, cost, cells, iters, conv, hist, cand, method="proposed"):
    amb = (cells + model.psi_int.astype(np.int64)).reshape(model.shape, order="F")
    return SolveReport(
        attitude=direction_to_euler(r),
        rotation=r.reshape(3, 1),
        ambiguities=amb,
        cost=float(cost),
        converged=bool(conv),
        iterations=int(iters),
        method=method,
        pool_sizes=(cand.pool_size,) if cand is not None else (),
        kept=(len(cand),) if cand is not None else (),
        circles_per_satellite=float(np.mean(cand.circles_per_satellite)) if cand is not None else float("nan"),
        history=tuple(float(h) for h in hist),
    )


def solve_single_baseline(epoch: DdEpoch, H, geometry: ArrayGeometry,
                          params: SolverParams | None = None) -> SolveReport:
    """Search, keep the top ``K`` cells, refine each and return the cheapest."""
    params = params or SolverParams()
    if geometry.n_baselines != 1:
        raise ValueError("single-baseline solver needs exactly one baseline")
    length = float(geometry.lengths[0])
    model = _single_model(epoch, H, length, params)
    cand = _search(model, length, params)
    r, c, cells, iters, conv, hist = _refine_batch(model, cand.directions, params.max_iter)
    i = int(np.argmin(c))
    return _single_report(model, r[i], c[i], cells[i], iters[i], conv[i], hist[i], cand)


# --------------------------------------------------------------------------
# multiple baselines
# --------------------------------------------------------------------------

def angle_filter(directions, angles, delta_theta):
    """Index tuples whose pairwise angles match ``angles`` within ``delta_theta``.

    ``directions[a]`` is a ``(K_a, 3)`` array of unit vectors for baseline
    ``a``. ``delta_theta`` is a scalar or an ``(A, A)`` array. Returns an
    ``(n, A)`` integer array in lexicographic order and raises
    ``EmptyAfterFilter`` when nothing survives.
    """
    A = len(directions)
    if A < 2:
        raise ValueError("angle filter needs at least two baselines")
    tol = np.broadcast_to(np.asarray(delta_theta, dtype=float), (A, A))
    passes = {}
    for a, k in itertools.combinations(range(A), 2):
        cos = np.clip(directions[a] @ directions[k].T, -1.0, 1.0)
        passes[a, k] = np.abs(np.arccos(cos) - angles[a, k]) < tol[a, k]
    # grow tuples one baseline at a time, keeping lexicographic order
    tuples = np.arange(len(directions[0]))[:, None]
    for k in range(1, A):
        ok = np.ones((len(tuples), len(directions[k])), dtype=bool)
        for a in range(k):
            ok &= passes[a, k][tuples[:, a]]
        rows, cols = np.nonzero(ok)
        tuples = np.column_stack([tuples[rows], cols])
        if len(tuples) == 0:
            raise EmptyAfterFilter("no candidate tuple satisfies the baseline angles")
    return tuples


def assemble_coarse_rotation(directions, geometry: ArrayGeometry):
    """Least-squares map of body baselines onto scaled reference directions.

    ``directions`` is ``(A, 3)`` for one tuple or ``(n, A, 3)`` for many; the
    result is ``(3, 3)`` or ``(n, 3, 3)``. Two baselines are augmented with
    the unit normal of their plane in both frames.
    """
    if geometry.n_baselines < 2:
        raise ValueError("assembly needs at least two baselines")
    r = np.asarray(directions, dtype=float)
    single = r.ndim == 2
    r = r.reshape(-1, geometry.n_baselines, 3)
    X = r * geometry.lengths[None, :, None]                  # (n, A, 3), rows are columns of X
    Xb = np.array(geometry.xb3).T                              # (A, 3)
    if geometry.n_baselines == 2:
        n_ref = np.cross(X[:, 0], X[:, 1])
        n_body = np.cross(Xb[0], Xb[1])
        X = np.concatenate([X, (n_ref / np.linalg.norm(n_ref, axis=1, keepdims=True))[:, None]], axis=1)
        Xb = np.vstack([Xb, n_body / np.linalg.norm(n_body)])
    G = Xb.T @ Xb
    if np.linalg.cond(G) > 1e12:
        raise SingularGram("body-frame baseline Gram matrix is singular")
    # R = X^T Xb (Xb^T Xb)^-1 with column-baseline convention
    R = np.einsum("nai,aj->nij", X, Xb) @ np.linalg.inv(G)
    return R[0] if single else R


def wahba_orthogonalize(R):
    """Nearest proper rotation in Frobenius norm, for one or stacked matrices."""
    R = np.asarray(R, dtype=float)
    U, s, Vt = np.linalg.svd(R)
    if np.any(s[..., 1] <= 1e-12 * np.maximum(s[..., 0], 1e-300)):
        warnings.warn("nearest rotation is not unique", RankDeficientWarning, stacklevel=2)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    sign = np.where(sign == 0, 1.0, sign)
    U = U.copy()
    U[..., :, 2] *= sign[..., None]
    return U @ Vt


def _refine_rotation_batch(model, R0, max_iter):
    """Unwrap loop over yaw/pitch/roll for many starting rotations at once.

    Same acceptance rule as :func:`_refine_batch`. Returns stacked
    ``(rotations (n, 3, q), costs, iterations, converged, histories)``.
    """
    q = model.q
    angles = np.array([rotation_to_euler(complete_rotation(R)).as_array() for R in R0])
    n = len(angles)
    pred = model.predict_many(vec_columns(rotation_stack(angles), q))
    best_c, cells = model.cost_and_cell(pred)
    iters = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    history = [[c] for c in best_c]
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        new_angles, *_ = euler_gauss_newton_batch(model.B, model.target(cells[idx]), angles[idx], q)
        pred = model.predict_many(vec_columns(rotation_stack(new_angles), q))
        c, new = model.cost_and_cell(pred)
        same = np.all(new == cells[idx], axis=1)
        ok = c <= best_c[idx]
        acc = idx[ok]
        angles[acc] = new_angles[ok]
        best_c[acc] = c[ok]
        iters[acc] += 1
        for i, ci in zip(acc, c[ok]):
            history[i].append(ci)
        cells[acc] = new[ok]
        converged[idx[same]] = True
        active[idx[same | ~ok]] = False
    R = rotation_stack(angles)[:, :, :q]
    return R, best_c, iters, converged, history


def _refine_rotation(model, R0, max_iter):
    """Single-start wrapper of :func:`_refine_rotation_batch`."""
    R, c, it, conv, hist = _refine_rotation_batch(model, [R0], max_iter)
    return R[0], float(c[0]), int(it[0]), bool(conv[0]), hist[0]


def _multi_report(model, R, cost, iters, conv, hist, **diag):
    return SolveReport(
        attitude=rotation_to_euler(R),
        rotation=R,
        ambiguities=model.ambiguities(R),
        cost=float(cost),
        converged=bool(conv),
        iterations=int(iters),
        history=tuple(float(h) for h in hist),
        **diag,
    )


def refine_multi(R0, epoch: DdEpoch, H, geometry: ArrayGeometry, mode="phase_and_code",
                 weighting="full", max_iter=50) -> SolveReport:
    """Refine a rotation by alternating unwrap and Gauss-Newton over Euler angles.

    A single-baseline geometry delegates to :func:`refine_single`.
    """
    if geometry.q == 1:
        r0 = np.asarray(R0, dtype=float)
        r0 = r0[:, 0] if r0.ndim == 2 and r0.shape == (3, 3) else r0.ravel()
        model = WeightedModel(epoch, H, geometry.xb, mode, weighting)
        r, c, cells, it, conv, hist = _refine_batch(model, r0, max_iter)
        return _single_report(model, r[0], c[0], cells[0], it[0], conv[0], hist[0], None)
    model = WeightedModel(epoch, H, geometry.xb, mode, weighting)
    R, c, it, conv, hist = _refine_rotation(model, R0, max_iter)
    return _multi_report(model, R, c, it, conv, hist)


def _baseline_candidates(epoch, H, geometry, params):
    """Per-baseline ranked directions, optionally refined and re-ranked by cell."""
    out, pools, kept, circ = [], [], [], []
    for a in range(geometry.n_baselines):
        length = float(geometry.lengths[a])
        model = _single_model(epoch.baseline(a), H, length, params)
        cand = _search(model, length, params, params.K_multi)
        dirs, costs = cand.directions, cand.costs
        if params.refine_candidates:
            dirs, costs, cells, *_ = _refine_batch(model, dirs, params.max_iter)
            keep = _top_cells(costs, cells, params.K_multi)
            dirs, costs = dirs[keep], costs[keep]
            if params.tail_probability is not None:
                # the true cell's refined cost is below its chi-square cost at the truth
                n_obs = model.B.shape[0]
                plausible = costs <= costs[0] + _chi2_quantile(params.tail_probability, n_obs)
                dirs, costs = dirs[plausible], costs[plausible]
        out.append(dirs)
        pools.append(cand.pool_size)
        kept.append(len(dirs))
        circ.append(np.mean(cand.circles_per_satellite))
    return out, tuple(pools), tuple(kept), float(np.mean(circ))


def solve_multi_baseline(epoch: DdEpoch, H, geometry: ArrayGeometry,
                         params: SolverParams | None = None) -> SolveReport:
    """Combine per-baseline candidates into rotations and refine the survivors."""
    params = params or SolverParams()
    if geometry.n_baselines < 2:
        raise ValueError("multi-baseline solver needs at least two baselines")
    dirs, pools, kept, circ = _baseline_candidates(epoch, H, geometry, params)
    degraded = False
    delta = params.delta_theta
    if delta is None:
        delta = default_delta_theta(epoch, H, geometry)
    try:
        tuples = angle_filter(dirs, geometry.angles, delta)
    except EmptyAfterFilter:
        try:
            tuples = angle_filter(dirs, geometry.angles, 2.0 * delta)
        except EmptyAfterFilter:
            # best candidate of every baseline, flagged as low confidence
            tuples = np.zeros((1, geometry.n_baselines), dtype=int)
            degraded = True
    n_pass = 0 if degraded else len(tuples)
    model = WeightedModel(epoch, H, geometry.xb, params.mode, params.weighting)
    stacked = np.stack([dirs[a][tuples[:, a]] for a in range(geometry.n_baselines)], axis=1)
    coarse = wahba_orthogonalize(assemble_coarse_rotation(stacked, geometry))
    coarse_pred = model.predict_many(vec_columns(coarse, model.q))
    # starts sharing a joint integer cell refine to the same fixed point
    keep = _top_cells(*model.cost_and_cell(coarse_pred), params.max_starts)
    starts = list(coarse[keep])
    Rs, costs, its, convs, hists = _refine_rotation_batch(model, starts, params.max_iter)
    i = int(np.argmin(costs))
    R, c, it, conv, hist = Rs[i], costs[i], its[i], convs[i], hists[i]
    return _multi_report(model, R, c, it, conv, hist, pool_sizes=pools, kept=kept, circles_per_satellite=circ,
                         tuples_after_filter=n_pass, degraded=degraded)


def solve(epoch: DdEpoch, H, geometry: ArrayGeometry, params: SolverParams | None = None) -> SolveReport:
    """Dispatch on the number of baselines."""
    if geometry.n_baselines == 1:
        return solve_single_baseline(epoch, H, geometry, params)
    return solve_multi_baseline(epoch, H, geometry, params)
