"""Independent reference computations used by the tests.

None of these reuse package internals: each recomputes its quantity by a
different route (explicit loops, elementary rotations, sampling, brute force).
"""

import itertools

import numpy as np
from scipy import optimize
from scipy.spatial.transform import Rotation


def dd_covariance_by_loops(sigma, n_dd, n_baselines, wavelength):
    """Covariance of vec(DD noise) from iid undifferenced noise, entry by entry.

    DD entry (s, a) = e[a+1, s+1] - e[0, s+1] - e[a+1, 0] + e[0, 0], with
    vec order a * S + s. The covariance of two entries is sigma^2 times the
    signed overlap of their four undifferenced terms.
    """
    S, A = n_dd, n_baselines

    def terms(s, a):
        return {(a + 1, s + 1): 1, (0, s + 1): -1, (a + 1, 0): -1, (0, 0): 1}

    Q = np.zeros((S * A, S * A))
    for a1, s1, a2, s2 in itertools.product(range(A), range(S), range(A), range(S)):
        t1, t2 = terms(s1, a1), terms(s2, a2)
        Q[a1 * S + s1, a2 * S + s2] = sum(c * t2.get(k, 0) for k, c in t1.items())
    return (sigma / wavelength) ** 2 * Q


def elementary_rotation(yaw, pitch, roll):
    """Rz(yaw) Ry(pitch) Rx(roll) built through scipy's intrinsic ZYX sequence."""
    return Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


def min_over_integers(psi, pred, weights, box=3):
    """min over integer vectors n of sum w (psi - pred - n)^2, by enumeration around the rounding."""
    d = np.asarray(psi, float) - np.asarray(pred, float)
    center = np.floor(d + 0.5)
    best = np.inf
    for off in itertools.product(range(-box, box + 1), repeat=len(d)):
        r = d - center - np.array(off)
        best = min(best, float(np.sum(weights * r * r)))
    return best


def circle_point_samples(axis, cos_theta, n):
    """``n`` equally spaced points on the circle {x : |x| = 1, axis . x = cos_theta}."""
    u = np.asarray(axis, float) / np.linalg.norm(axis)
    helper = np.eye(3)[np.argmin(np.abs(u))]
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    s = np.sqrt(max(0.0, 1 - cos_theta ** 2))
    return cos_theta * u + s * (np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2)


def circles_meet_by_sampling(us, cs, um, cm, n=10**6):
    """Whether circle s reaches the plane of circle m, from a dense sample of circle s.

    Returns ``(meets, min_gap)``: a sign change of ``um . x - cm`` along the
    sample means the circles cross.
    """
    pts = circle_point_samples(us, cs, n)
    f = pts @ np.asarray(um, float) - cm
    meets = bool(np.any(np.sign(f) != np.sign(f[0])) or np.any(f == 0))
    return meets, float(np.min(np.abs(f)))


def unit_norm_lstsq_by_search(B, z, starts=64, seed=0):
    """min ||B r - z|| over unit r, by multi-start local optimization on the sphere."""
    rng = np.random.default_rng(seed)

    def cost(angles):
        r = np.array([np.cos(angles[0]) * np.cos(angles[1]),
                      np.sin(angles[0]) * np.cos(angles[1]),
                      np.sin(angles[1])])
        e = B @ r - z
        return e @ e

    best = None
    for _ in range(starts):
        x0 = [rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 2, np.pi / 2)]
        res = optimize.minimize(cost, x0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15,
                                                                           "maxiter": 4000})
        if best is None or res.fun < best.fun:
            best = res
    a = best.x
    return np.array([np.cos(a[0]) * np.cos(a[1]), np.sin(a[0]) * np.cos(a[1]), np.sin(a[1])]), float(best.fun)


def central_difference(f, x, h=1e-6):
    """Column-wise central finite-difference Jacobian of vector function f at x."""
    x = np.asarray(x, float)
    cols = []
    for i in range(len(x)):
        dx = np.zeros_like(x)
        dx[i] = h
        cols.append((np.asarray(f(x + dx)) - np.asarray(f(x - dx))) / (2 * h))
    return np.column_stack(cols)


def random_rotations(n, rng):
    return Rotation.random(n, random_state=rng).as_matrix()


def random_los(rng, n_sats, mask_deg=10.0):
    """Cap-uniform unit LOS vectors (no spacing rule), highest first."""
    lo = np.sin(np.radians(mask_deg))
    el = np.arcsin(rng.uniform(lo, 1.0, n_sats))
    az = rng.uniform(0, 2 * np.pi, n_sats)
    v = np.column_stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
    return v[np.argsort(-v[:, 2], kind="stable")]
