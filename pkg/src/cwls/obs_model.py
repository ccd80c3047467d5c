"""Double-difference observation model, array geometry and attitude types.

All phase and code quantities are stored in cycles. The design matrix maps
a baseline vector in meters to double-difference cycles, so the same ``H``
serves both the carrier-phase and the pseudo-range rows.

Conventions
-----------
* Satellite 0 is the reference satellite and antenna 0 the reference antenna.
* ``vec`` stacks the columns of an ``S x A`` matrix, so entry ``(s, a)`` of
  ``Psi`` lands at index ``a * S + s`` of ``vec(Psi)``.
* Attitude is yaw-pitch-roll, ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import DegenerateGeometry

GPS_L1_WAVELENGTH = 299792458.0 / 1575.42e6  # m

_TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Map angles to (-pi, pi]."""
    angle = np.asarray(angle, dtype=float)
    out = angle - _TWO_PI * np.ceil(angle / _TWO_PI - 0.5)
    out = np.where(out <= -np.pi, out + _TWO_PI, out)
    out = np.where(out > np.pi, out - _TWO_PI, out)
    return out if out.ndim else float(out)


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# Line of sight and design matrix
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LosSet:
    """Unit receiver-to-satellite vectors, reference satellite first.

    Attributes:
        vectors: ``(S+1, 3)`` unit line-of-sight vectors.
        wavelength: Carrier wavelength in meters.
    """

    vectors: np.ndarray
    wavelength: float = GPS_L1_WAVELENGTH

    def __post_init__(self):
        v = _readonly(self.vectors)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 2:
            raise ValueError("LOS vectors must have shape (S+1, 3) with S >= 1")
        if not np.allclose(np.linalg.norm(v, axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("LOS vectors must be unit norm (use LosSet.from_vectors)")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @classmethod
    def from_vectors(cls, vectors, wavelength=GPS_L1_WAVELENGTH):
        """Build from arbitrary nonzero direction vectors (normalized here)."""
        v = np.asarray(vectors, dtype=float)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True), wavelength)

    @classmethod
    def from_az_el(cls, azimuth, elevation, wavelength=GPS_L1_WAVELENGTH):
        """Build from azimuth/elevation in radians (ENU frame)."""
        az = np.asarray(azimuth, dtype=float)
        el = np.asarray(elevation, dtype=float)
        v = np.column_stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
        return cls.from_vectors(v, wavelength)

    @property
    def n_dd(self):
        """Number of double-difference rows S."""
        return self.vectors.shape[0] - 1

    @property
    def elevations(self):
        return np.arcsin(np.clip(self.vectors[:, 2], -1.0, 1.0))

    def min_pairwise_angle(self):
        v = self.vectors
        cosines = np.clip(v @ v.T, -1.0, 1.0)
        iu = np.triu_indices(len(v), k=1)
        return float(np.min(np.arccos(cosines[iu])))


@dataclass(frozen=True)
class DesignMatrix:
    """``H`` with row ``s`` equal to ``(h^s - h^0)^T / wavelength``."""

    H: np.ndarray
    row_norms: np.ndarray

    @property
    def n_dd(self):
        return self.H.shape[0]

    @cached_property
    def singular_values(self):
        return np.linalg.svd(self.H, compute_uv=False)


def build_design_matrix(los: LosSet, min_rank: int = 3) -> DesignMatrix:
    """Double-difference design matrix in cycles per meter.

    Raises ``DegenerateGeometry`` when a row vanishes (coincident satellites)
    or when ``H`` has fewer than ``min_rank`` singular values above 1e-9.
    Use ``min_rank=2`` for two-row single-baseline experiments.
    """
    v = los.vectors
    H = (v[1:] - v[0]) / los.wavelength
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms * los.wavelength < 1e-6):
        raise DegenerateGeometry("a satellite coincides with the reference satellite")
    if los.min_pairwise_angle() <= 1e-6:
        raise DegenerateGeometry("two line-of-sight vectors coincide")
    sv = np.linalg.svd(H, compute_uv=False)
    rank = int(np.sum(sv > 1e-9))
    if rank < min_rank:
        raise DegenerateGeometry(f"design matrix rank {rank} < {min_rank}")
    return DesignMatrix(_readonly(H), _readonly(norms))


# --------------------------------------------------------------------------
# Antenna array geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArrayGeometry:
    """Body-frame baseline matrix ``X_b`` (q x A, meters, upper triangular).

    Column ``a`` holds the body-frame coordinates of baseline ``a``. For a
    single baseline ``X_b = [[d]]``; for two baselines the body frame is the
    plane of the array.
    """

    xb: np.ndarray

    def __post_init__(self):
        xb = np.atleast_2d(np.array(self.xb, dtype=float))
        q, n = xb.shape
        if n < 1 or q != min(3, n):
            raise ValueError(f"X_b must be min(3, A) x A, got {xb.shape}")
        if np.any(np.tril(xb[:, :q], k=-1) != 0.0):
            raise ValueError("X_b entries below the diagonal must be exactly 0")
        if q == 1 and not xb[0, 0] > 0:
            raise ValueError("single-baseline X_b must be positive")
        lengths = np.linalg.norm(xb, axis=0)
        if np.any(lengths <= 0):
            raise ValueError("baseline lengths must be positive")
        if n >= 2:
            u = xb / lengths
            c = np.abs(u.T @ u)
            np.fill_diagonal(c, 0.0)
            if np.any(c > 1.0 - 1e-12):
                raise ValueError("baselines must be pairwise non-collinear")
        xb.setflags(write=False)
        object.__setattr__(self, "xb", xb)

    @classmethod
    def single(cls, length=1.0):
        return cls([[length]])

    @classmethod
    def orthogonal(cls, n_baselines, length=1.0):
        """Mutually perpendicular baselines of equal length (identity-style X_b)."""
        if n_baselines not in (1, 2, 3):
            raise ValueError("orthogonal preset supports 1, 2 or 3 baselines")
        return cls(length * np.eye(n_baselines))

    @property
    def q(self):
        return self.xb.shape[0]

    @property
    def n_baselines(self):
        return self.xb.shape[1]

    @cached_property
    def lengths(self):
        return _readonly(np.linalg.norm(self.xb, axis=0))

    @cached_property
    def angles(self):
        """Inter-baseline angles ``Theta[a, k]`` in radians."""
        u = self.xb / self.lengths
        return _readonly(np.arccos(np.clip(u.T @ u, -1.0, 1.0)))

    @cached_property
    def xb3(self):
        """Baselines embedded in 3-D body coordinates (3 x A)."""
        out = np.zeros((3, self.n_baselines))
        out[: self.q] = self.xb
        return _readonly(out)


# --------------------------------------------------------------------------
# Epoch
# --------------------------------------------------------------------------

def _whitener(cov, weighting):
    if weighting == "diagonal":
        return np.diag(1.0 / np.sqrt(np.diag(cov)))
    if weighting != "full":
        raise ValueError(f"unknown weighting {weighting!r}")
    L = linalg.cholesky(cov, lower=True)
    return linalg.solve_triangular(L, np.eye(len(cov)), lower=True)


@dataclass(frozen=True)
class DdEpoch:
    """One epoch of double-difference observations, in cycles.

    Attributes:
        psi: ``(S, A)`` carrier phase.
        rho: ``(S, A)`` pseudo-range.
        q_psi: ``(A*S, A*S)`` covariance of ``vec(psi)``.
        q_rho: ``(A*S, A*S)`` covariance of ``vec(rho)``.
    """

    psi: np.ndarray
    rho: np.ndarray
    q_psi: np.ndarray
    q_rho: np.ndarray

    def __post_init__(self):
        psi = np.array(self.psi, dtype=float)
        if psi.ndim == 1:
            psi = psi[:, None]
        rho = np.array(self.rho, dtype=float).reshape(psi.shape)
        n = psi.size
        q_psi = np.array(self.q_psi, dtype=float)
        q_rho = np.array(self.q_rho, dtype=float)
        for name, q in (("q_psi", q_psi), ("q_rho", q_rho)):
            if q.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}, got {q.shape}")
            if not np.allclose(q, q.T, rtol=1e-12, atol=0):
                raise ValueError(f"{name} must be symmetric")
            try:
                linalg.cholesky(q, lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError(f"{name} must be positive definite") from exc
        for name, a in (("psi", psi), ("rho", rho), ("q_psi", q_psi), ("q_rho", q_rho)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_dd(self):
        return self.psi.shape[0]

    @property
    def n_baselines(self):
        return self.psi.shape[1]

    def baseline(self, a: int) -> "DdEpoch":
        """Single-baseline slice (marginal covariance blocks) for column ``a``."""
        S = self.n_dd
        sl = slice(a * S, (a + 1) * S)
        # principal blocks of validated covariances need no second check
        out = object.__new__(DdEpoch)
        for name, arr in (("psi", self.psi[:, a:a + 1]), ("rho", self.rho[:, a:a + 1]),
                          ("q_psi", self.q_psi[sl, sl]), ("q_rho", self.q_rho[sl, sl])):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(out, name, arr)
        return out

    def shifted(self, dn) -> "DdEpoch":
        """Same epoch with an integer matrix added to the phase."""
        dn = np.asarray(dn)
        if not np.issubdtype(dn.dtype, np.integer):
            raise TypeError("phase shift must be an integer array")
        return DdEpoch(self.psi + dn.reshape(self.psi.shape), self.rho, self.q_psi, self.q_rho)

    def whitener(self, which="phase", weighting="full"):
        """Matrix ``W`` with ``||W e||^2 = e^T Q^-1 e`` (cached per epoch)."""
        cache = self.__dict__.setdefault("_whiteners", {})
        key = (which, weighting)
        if key not in cache:
            cov = {"phase": self.q_psi, "code": self.q_rho}[which]
            w = _whitener(cov, weighting)
            w.setflags(write=False)
            cache[key] = w
        return cache[key]


def dd_operator(n_dd: int, n_baselines: int) -> np.ndarray:
    """Linear map from undifferenced errors to ``vec`` of DD errors.

    Undifferenced errors are ordered as ``e[antenna, satellite]`` flattened
    row-major over ``(A+1, S+1)``.
    """
    S, A = n_dd, n_baselines
    D = np.zeros((A * S, (A + 1) * (S + 1)))
    idx = np.arange((A + 1) * (S + 1)).reshape(A + 1, S + 1)
    for a in range(1, A + 1):
        for s in range(1, S + 1):
            row = (a - 1) * S + (s - 1)
            D[row, idx[a, s]] += 1.0
            D[row, idx[0, s]] -= 1.0
            D[row, idx[a, 0]] -= 1.0
            D[row, idx[0, 0]] += 1.0
    return D


def build_dd_covariance(sigma_phase, sigma_code, n_dd, n_baselines,
                        wavelength=GPS_L1_WAVELENGTH, elevations=None):
    """Covariances of ``vec(Psi)`` and ``vec(P)`` in cycles squared.

    ``sigma_phase`` and ``sigma_code`` are undifferenced standard deviations
    in meters, iid over antennas and satellites. Differencing against a shared
    reference antenna and reference satellite gives

        Q = (sigma / wavelength)^2 * (I_A + 1 1^T) kron (I_S + 1 1^T).

    If ``elevations`` (radians, one per tracked satellite, reference first)
    is given, the undifferenced variance of satellite ``s`` is scaled by
    ``1 / sin(el_s)^2`` and propagated through the differencing operator.
    """
    if not (sigma_phase > 0 and sigma_code > 0):
        raise ValueError("standard deviations must be positive")
    S, A = int(n_dd), int(n_baselines)
    if elevations is None:
        pattern = np.kron(np.eye(A) + 1.0, np.eye(S) + 1.0)
        return (
            (sigma_phase / wavelength) ** 2 * pattern,
            (sigma_code / wavelength) ** 2 * pattern,
        )
    el = np.asarray(elevations, dtype=float)
    if el.shape != (S + 1,):
        raise ValueError("need one elevation per tracked satellite")
    scale = np.tile(1.0 / np.sin(el) ** 2, A + 1)
    D = dd_operator(S, A)
    pattern = (D * scale) @ D.T
    return (
        (sigma_phase / wavelength) ** 2 * pattern,
        (sigma_code / wavelength) ** 2 * pattern,
    )


# --------------------------------------------------------------------------
# Attitude
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Attitude:
    """Yaw, pitch and roll in radians, each wrapped to (-pi, pi].

    ``roll`` is meaningless for a single baseline and is kept at 0 there.
    ``gimbal_lock`` is set by :func:`rotation_to_euler` when ``|cos(pitch)|``
    is below 1e-7; roll is then 0 by convention.
    """

    yaw: float
    pitch: float
    roll: float = 0.0
    gimbal_lock: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, wrap_angle(value))

    def as_array(self):
        return np.array([self.yaw, self.pitch, self.roll])

    def rotation(self, q=3):
        return euler_to_rotation(self, q)

    def degrees(self):
        return np.rad2deg(self.as_array())


def rotation_matrix(yaw, pitch, roll):
    """Full 3x3 yaw-pitch-roll rotation."""
    ca, sa = np.cos(yaw), np.sin(yaw)
    cb, sb = np.cos(pitch), np.sin(pitch)
    cg, sg = np.cos(roll), np.sin(roll)
    return np.array([
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ])


def rotation_derivatives(yaw, pitch, roll):
    """Partial derivatives of :func:`rotation_matrix`, shape ``(3, 3, 3)``.

    ``out[i]`` is the derivative with respect to angle ``i`` (yaw, pitch, roll).
    """
    ca, sa = np.cos(yaw), np.sin(yaw)
    cb, sb = np.cos(pitch), np.sin(pitch)
    cg, sg = np.cos(roll), np.sin(roll)
    d_yaw = np.array([
        [-sa * cb, -sa * sb * sg - ca * cg, -sa * sb * cg + ca * sg],
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [0.0, 0.0, 0.0],
    ])
    d_pitch = np.array([
        [-ca * sb, ca * cb * sg, ca * cb * cg],
        [-sa * sb, sa * cb * sg, sa * cb * cg],
        [-cb, -sb * sg, -sb * cg],
    ])
    d_roll = np.array([
        [0.0, ca * sb * cg + sa * sg, -ca * sb * sg + sa * cg],
        [0.0, sa * sb * cg - ca * sg, -sa * sb * sg - ca * cg],
        [0.0, cb * cg, -cb * sg],
    ])
    return np.stack([d_yaw, d_pitch, d_roll])


def euler_to_rotation(att: Attitude, q: int = 3) -> np.ndarray:
    """First ``q`` columns of the yaw-pitch-roll rotation."""
    if q not in (1, 2, 3):
        raise ValueError("q must be 1, 2 or 3")
    return rotation_matrix(att.yaw, att.pitch, att.roll)[:, :q]


def complete_rotation(R):
    """Extend a 3x1 or 3x2 orthonormal block to a full 3x3 rotation."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    q = R.shape[1]
    if q == 3:
        return R
    if q == 2:
        return np.column_stack([R, np.cross(R[:, 0], R[:, 1])])
    att = direction_to_euler(R[:, 0])
    return rotation_matrix(att.yaw, att.pitch, 0.0)


def direction_to_euler(r) -> Attitude:
    """Yaw and pitch of a unit baseline direction (roll fixed at 0)."""
    r = np.asarray(r, dtype=float).ravel()
    r = r / np.linalg.norm(r)
    return Attitude(np.arctan2(r[1], r[0]), -np.arcsin(np.clip(r[2], -1.0, 1.0)), 0.0)


def rotation_to_euler(R) -> Attitude:
    """Invert :func:`euler_to_rotation`.

    Accepts a 3x3 rotation, or a 3x2 / 3x1 orthonormal block (completed by the
    cross product, or reduced to yaw/pitch for a single column).
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 1 or R.shape[1] == 1:
        return direction_to_euler(R)
    if R.shape[1] == 2:
        R = complete_rotation(R)
    if R.shape != (3, 3):
        raise ValueError("expected a 3x3 rotation")
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) < 1e-7:
        # yaw and roll are coupled; put everything in yaw
        yaw = np.arctan2(-R[0, 1], R[1, 1])
        return Attitude(yaw, pitch, 0.0, gimbal_lock=True)
    return Attitude(np.arctan2(R[1, 0], R[0, 0]), pitch, np.arctan2(R[2, 1], R[2, 2]))


def geodesic_angle(R1, R2):
    """Rotation angle between two attitudes, or the angle between two directions.

    Both use arctan2 forms, accurate down to rounding level for tiny angles.
    """
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    if R1.ndim == 1 or R1.shape[-1] == 1:
        a, b = R1.ravel(), R2.ravel()
        return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))
    D = complete_rotation(R1).T @ complete_rotation(R2)
    # sin from the skew part, cos from the trace
    skew = np.array([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(D) - 1.0)))
