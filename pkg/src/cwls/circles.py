"""Circles of constant phase on the unit sphere and their pairwise intersections.

For a single baseline of length ``d`` with unit direction ``r``, an integer
hypothesis ``N`` for satellite ``s`` pins ``h_s . r`` to ``(psi_s - N) / d``.
On the unit sphere this is a circle with axis ``h_s / ||h_s||`` and
``cos(theta) = (psi_s - N) / (d ||h_s||)``. Two such circles from different
satellites meet in at most two points; the true direction is a common point
of all circles built from the true integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import CollinearAxes

# source tags for candidate points
SOURCE_Q1, SOURCE_Q2, SOURCE_P1, SOURCE_P2, SOURCE_AXIS = 0, 1, 2, 3, 4
SOURCE_NAMES = ("q1", "q2", "p1", "p2", "axis")

_COLLINEAR_SIN = np.sin(1e-6)


def _cross_rows(a, b):
    """Row-wise cross product of ``(n, 3)`` arrays (cheaper than ``np.cross`` at this size)."""
    return np.column_stack([a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
                            a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
                            a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]])


@lru_cache(maxsize=64)
def _pair_indices(S):
    s_of, m_of = np.triu_indices(S, 1)
    s_of.setflags(write=False)
    m_of.setflags(write=False)
    return s_of, m_of


@dataclass(frozen=True)
class SphereCircle:
    axis: np.ndarray          # h_s in cycles per meter
    cos_theta: float
    satellite: int
    ambiguity: int

    def __post_init__(self):
        if abs(self.cos_theta) > 1.0:
            raise ValueError("|cos_theta| must not exceed 1")
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=float))

    @cached_property
    def unit_axis(self):
        return self.axis / np.linalg.norm(self.axis)

    @property
    def center(self):
        return self.cos_theta * self.unit_axis

    @property
    def radius(self):
        return float(np.sqrt(max(0.0, 1.0 - self.cos_theta**2)))


def circle_bounds(psi, row_norms, length, margin=0.0):
    """Inclusive integer range per satellite admitted by ``|psi - N| <= d ||h|| + margin``."""
    reach = length * np.asarray(row_norms, dtype=float) + margin
    psi = np.asarray(psi, dtype=float)
    return np.ceil(psi - reach).astype(np.int64), np.floor(psi + reach).astype(np.int64)


def enumerate_circles(psi, H, length):
    """All circles for one baseline: one per satellite and admissible integer."""
    H = np.asarray(getattr(H, "H", H), dtype=float)
    psi = np.asarray(psi, dtype=float).ravel()
    if not length > 0:
        raise ValueError("baseline length must be positive")
    norms = np.linalg.norm(H, axis=1)
    lo, hi = circle_bounds(psi, norms, length)
    out = []
    for s in range(len(psi)):
        reach = length * norms[s]
        for n in range(lo[s], hi[s] + 1):
            c = float(np.clip((psi[s] - n) / reach, -1.0, 1.0))
            out.append(SphereCircle(H[s], c, s, int(n)))
    return out


@dataclass(frozen=True)
class PairIntersection:
    """Candidate points of one circle pair.

    ``kind`` is ``"cross"`` (two true intersection points), ``"tangent"``,
    ``"near_miss"`` (peak points within the gap threshold) or ``"none"``.
    """

    points: np.ndarray
    sources: tuple
    kind: str
    deltas: tuple


def intersect_arrays(us, um, cs, cm, gap):
    """Vectorized circle-pair kernel.

    ``us``, ``um`` are unit axes of shape ``(n, 3)``; ``cs``, ``cm`` the circle
    cosines and ``gap`` the near-miss threshold, all broadcastable to ``(n,)``.
    Returns the two intersection points, the two peak points, the signed
    plane offsets ``delta1``, ``delta2`` of the peak points and a boolean mask
    of crossing pairs.
    """
    us = np.atleast_2d(us)
    um = np.atleast_2d(um)
    cs = np.asarray(cs, dtype=float)
    cm = np.asarray(cm, dtype=float)
    cross = np.cross(us, um)
    sin_sm = np.linalg.norm(cross, axis=1)
    if np.any(sin_sm < _COLLINEAR_SIN):
        raise CollinearAxes("circle axes are (anti)parallel")
    v1 = cross / sin_sm[:, None]
    v2 = np.cross(v1, um)
    sm = np.sqrt(np.maximum(0.0, 1.0 - cm * cm))
    c_sm = np.sum(us * um, axis=1)
    v2s = np.sum(v2 * us, axis=1)
    p1 = cm[..., None] * um - sm[..., None] * v2
    p2 = cm[..., None] * um + sm[..., None] * v2
    delta1 = cm * c_sm - sm * v2s - cs
    delta2 = cm * c_sm + sm * v2s - cs
    crossing = delta1 * delta2 < 0
    # closest point of both planes to the origin: p = a us + b um
    det = sin_sm * sin_sm
    a = (cs - c_sm * cm) / det
    b = (cm - c_sm * cs) / det
    pc = a[..., None] * us + b[..., None] * um
    half = np.sqrt(np.maximum(0.0, 1.0 - np.sum(pc * pc, axis=1)))
    q1 = pc - half[:, None] * v1
    q2 = pc + half[:, None] * v1
    q1 /= np.linalg.norm(q1, axis=1, keepdims=True)
    q2 /= np.linalg.norm(q2, axis=1, keepdims=True)
    p1 /= np.linalg.norm(p1, axis=1, keepdims=True)
    p2 /= np.linalg.norm(p2, axis=1, keepdims=True)
    return q1, q2, p1, p2, delta1, delta2, crossing


def circle_pair_intersections(cs: SphereCircle, cm: SphereCircle, gap: float) -> PairIntersection:
    """Intersection or near-miss candidates of two circles on the unit sphere."""
    q1, q2, p1, p2, d1, d2, crossing = intersect_arrays(
        cs.unit_axis, cm.unit_axis, np.array([cs.cos_theta]), np.array([cm.cos_theta]), gap)
    d1, d2 = float(d1[0]), float(d2[0])
    if crossing[0]:
        return PairIntersection(np.vstack([q1, q2]), (SOURCE_Q1, SOURCE_Q2), "cross", (d1, d2))
    tangent = d1 == 0.0 or d2 == 0.0
    if tangent:
        take1, take2 = d1 == 0.0, d2 == 0.0
    else:
        take1, take2 = abs(d1) < gap, abs(d2) < gap
    if take1 and take2 and np.allclose(p1[0], p2[0], rtol=0, atol=1e-15):
        take2 = False  # point circle: both peaks coincide
    pts = [p for p, t in ((p1[0], take1), (p2[0], take2)) if t]
    src = tuple(s for s, t in ((SOURCE_P1, take1), (SOURCE_P2, take2)) if t)
    kind = ("tangent" if tangent else "near_miss") if pts else "none"
    return PairIntersection(np.array(pts).reshape(-1, 3), src, kind, (d1, d2))


def pool_points(axes, cosines, gap):
    """Candidate points of every circle pair across all satellite pairs.

    ``axes`` holds one unit axis per satellite, ``cosines[s]`` the circle
    cosines of satellite ``s`` and ``gap`` the near-miss threshold, a scalar
    or an ``(S, S)`` matrix indexed by satellite pair. Crossing pairs
    contribute both intersection points; the others contribute peak points
    that touch (tangent) or come within the gap of the partner plane. Output order is satellite pair, then circle of ``s``, then
    circle of ``m``, then source tag. Returns ``(points, sources, pairs)``.
    """
    axes = np.asarray(axes, dtype=float)
    S = len(axes)
    gap = np.broadcast_to(np.asarray(gap, dtype=float), (S, S))
    s_of, m_of = _pair_indices(S)
    if len(s_of) == 0:
        return np.empty((0, 3)), np.empty(0, int), np.empty((0, 2), int)
    us_pair, um_pair = axes[s_of], axes[m_of]
    cross = _cross_rows(us_pair, um_pair)
    sin_sm = np.linalg.norm(cross, axis=1)
    if np.any(sin_sm < _COLLINEAR_SIN):
        raise CollinearAxes("circle axes are (anti)parallel")
    v1 = cross / sin_sm[:, None]
    v2 = _cross_rows(v1, um_pair)
    c_pair = np.einsum("ij,ij->i", us_pair, um_pair)
    w_pair = np.einsum("ij,ij->i", v2, axes[s_of])

    # element k belongs to pair[k] and combines circle i of s with circle j of m;
    # NaN padding to a common circle count never passes any of the tests below
    width = max(len(c) for c in cosines)
    padded = np.full((S, width), np.nan)
    for s, cos in enumerate(cosines):
        padded[s, :len(cos)] = cos
    pair = np.repeat(np.arange(len(s_of)), width * width)
    cs = np.repeat(padded[s_of], width, axis=1).ravel()
    cm = np.tile(padded[m_of], (1, width)).ravel()
    c, w, det = c_pair[pair], w_pair[pair], sin_sm[pair] ** 2
    sm = np.sqrt(np.maximum(0.0, 1.0 - cm * cm))
    d1 = cm * c - sm * w - cs
    d2 = cm * c + sm * w - cs
    crossing = d1 * d2 < 0
    g = gap[s_of, m_of][pair]
    tangent = ~crossing & ((d1 == 0.0) | (d2 == 0.0))
    near = ~crossing & ~tangent
    take = np.column_stack([
        crossing,
        crossing,
        (tangent & (d1 == 0.0)) | (near & (np.abs(d1) < g)),
        (tangent & (d2 == 0.0)) | (near & (np.abs(d2) < g)),
    ])
    k, src = np.nonzero(take)
    pk = pair[k]
    us, um = axes[s_of[pk]], axes[m_of[pk]]
    pts = np.empty((len(k), 3))
    isq = src < 2
    if np.any(isq):
        kk, pq = k[isq], pk[isq]
        a = (cs[kk] - c[kk] * cm[kk]) / det[kk]
        b = (cm[kk] - c[kk] * cs[kk]) / det[kk]
        pc = a[:, None] * us[isq] + b[:, None] * um[isq]
        half = np.sqrt(np.maximum(0.0, 1.0 - np.einsum("ij,ij->i", pc, pc)))
        sign = np.where(src[isq] == 0, -1.0, 1.0)
        pts[isq] = pc + (sign * half)[:, None] * v1[pq]
    isp = ~isq
    if np.any(isp):
        kk, pp = k[isp], pk[isp]
        sign = np.where(src[isp] == 2, -1.0, 1.0)
        pts[isp] = cm[kk][:, None] * um[isp] + (sign * sm[kk])[:, None] * v2[pp]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pairs = np.column_stack([s_of[pk], m_of[pk]])
    return pts, src, pairs


def axis_points(axes, cosines, gap):
    """Axis points of circles no wider than the near-miss gap.

    Such circles are (nearly) points; pairwise tests only see them as
    near-misses, so they are offered as candidates directly. Returns
    ``(points, sources, pairs)`` with ``pairs`` holding ``(s, s)``.
    """
    axes = np.asarray(axes, dtype=float)
    gap = np.broadcast_to(np.asarray(gap, dtype=float), (len(axes),))
    pts, sats = [], []
    for s, cos in enumerate(cosines):
        if len(cos) == 0:
            continue
        # the radius shrinks with |cos|, so only the extreme circles can qualify
        for c, sign in ((np.min(cos), -1.0), (np.max(cos), 1.0)):
            if sign * c > 0 and 1.0 - c * c <= gap[s] * gap[s]:
                pts.append(sign * axes[s])
                sats.append(s)
    if not pts:
        return np.empty((0, 3)), np.empty(0, int), np.empty((0, 2), int)
    sats = np.array(sats)
    return np.array(pts), np.full(len(sats), SOURCE_AXIS), np.column_stack([sats, sats])
