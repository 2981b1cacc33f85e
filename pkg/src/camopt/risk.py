"""Collision risk metrics: B-plane projection, the short-term probability
of collision via Chan's series and its numerical inversion, the
instantaneous probability for long-term encounters, and combination rules
for multiple conjunctions and mixture components.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special
from scipy.optimize import brentq


class RiskError(Exception):
    pass


# ---------------------------------------------------------------------
# B-plane


def bplane_basis(vp: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Rows are the xi, zeta axes of the encounter plane.

    eta is along the relative velocity of the primary w.r.t. the secondary;
    xi follows the cross product of the two velocities; when the velocities
    are parallel any direction orthogonal to eta is taken.
    """
    dv = np.asarray(vp, float) - np.asarray(vs, float)
    ndv = np.linalg.norm(dv)
    if ndv == 0.0:
        raise RiskError("zero relative velocity, B-plane undefined")
    eta = dv / ndv
    xi = np.cross(vs, vp)
    nxi = np.linalg.norm(xi)
    if nxi <= 1e-12 * np.linalg.norm(vp) * np.linalg.norm(vs):
        # parallel velocities: pick any axis orthogonal to eta
        seed = np.eye(3)[int(np.argmin(np.abs(eta)))]
        xi = np.cross(eta, seed)
        nxi = np.linalg.norm(xi)
    xi = xi / nxi
    zeta = np.cross(eta, xi)
    return np.vstack([xi, zeta])


def bplane_project(dr: np.ndarray, P: np.ndarray, vp: np.ndarray,
                   vs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a relative position and 3x3 covariance onto the B-plane."""
    M = bplane_basis(vp, vs)
    return M @ np.asarray(dr, float), M @ np.asarray(P, float) @ M.T


# ---------------------------------------------------------------------
# Chan's probability of collision


def chan_uv(dr2: np.ndarray, P2: np.ndarray, hbr: float) -> tuple[float, float]:
    """Reduce a planar encounter to Chan's two scalars.

    u compares the hard-body area with the covariance ellipse area, v is
    the squared Mahalanobis distance of the miss vector.
    """
    P2 = np.asarray(P2, float)
    det = np.linalg.det(P2)
    if det <= 0.0:
        raise RiskError("projected covariance is singular")
    u = hbr * hbr / math.sqrt(det)
    dr2 = np.asarray(dr2, float)
    v = float(dr2 @ np.linalg.solve(P2, dr2))
    return u, v


def chan_poc(u: float, v: float, tol: float = 1e-15) -> float:
    """Chan's series for the 2D collision probability.

    The inner truncated exponential sums are regularized incomplete gamma
    functions, which keeps every term accurate without cancellation; the
    Poisson weights in v are evaluated in log space so extreme miss
    distances underflow gracefully instead of corrupting the sum.
    """
    if u < 0 or v < 0:
        raise RiskError("need non-negative u and v")
    if u == 0.0:
        return 0.0
    half_u, half_v = 0.5 * u, 0.5 * v
    if half_v == 0.0:
        total = float(special.gammainc(1.0, half_u))
        return min(max(total, 0.0), 1.0)
    # the Poisson weights in v carry all their mass within a few standard
    # deviations of the mode, so the sum runs over that window only; the
    # inner factors are bounded by one, which bounds the neglected tails
    spread = 12.0 * math.sqrt(half_v) + 30.0
    n_lo = max(0, int(half_v - spread))
    m = np.arange(n_lo, int(half_v + spread) + 1)
    log_pois = -half_v + m * math.log(half_v) - special.gammaln(m + 1.0)
    inner = special.gammainc(m + 1.0, half_u)
    with np.errstate(under="ignore"):
        total = float(np.sum(np.exp(log_pois) * inner))
    return min(max(total, 0.0), 1.0)


def invert_chan(p_target: float, u: float, v_max: float = 1e6) -> float:
    """Squared Mahalanobis distance at which Chan's series equals p_target."""
    if not (0.0 < p_target < 1.0):
        raise RiskError("target probability must be in (0, 1)")
    p0 = chan_poc(u, 0.0)
    if p_target >= p0:
        # even a head-on encounter stays below the limit
        return 0.0
    f = lambda v: chan_poc(u, v) - p_target
    v_hi = 1.0
    while f(v_hi) > 0.0:
        v_hi *= 4.0
        if v_hi > v_max:
            raise RiskError("could not bracket the miss-distance limit")
    return float(brentq(f, 0.0, v_hi, xtol=1e-14, rtol=1e-13))


def poc_from_states(xp: np.ndarray, xs: np.ndarray, P3: np.ndarray,
                    hbr: float) -> float:
    """Full short-term pipeline from Cartesian states at closest approach."""
    dr = np.asarray(xp[:3], float) - np.asarray(xs[:3], float)
    dr2, P2 = bplane_project(dr, P3, xp[3:], xs[3:])
    u, v = chan_uv(dr2, P2, hbr)
    return chan_poc(u, v)


# ---------------------------------------------------------------------
# instantaneous probability for long-term encounters


def ipoc(dr3: np.ndarray, P3: np.ndarray, hbr: float) -> float:
    """Constant-density estimate of the instantaneous collision probability."""
    P3 = np.asarray(P3, float)
    det = np.linalg.det(P3)
    if det <= 0.0:
        raise RiskError("relative position covariance is singular")
    dr3 = np.asarray(dr3, float)
    d2 = float(dr3 @ np.linalg.solve(P3, dr3))
    val = math.sqrt(2.0 / (math.pi * det)) * hbr ** 3 / 3.0 * math.exp(-0.5 * d2)
    return min(max(val, 0.0), 1.0)


def smd_3d(dr3: np.ndarray, P3: np.ndarray) -> float:
    dr3 = np.asarray(dr3, float)
    return float(dr3 @ np.linalg.solve(np.asarray(P3, float), dr3))


def invert_ipoc(p_target: float, P3: np.ndarray, hbr: float) -> float:
    """Squared Mahalanobis distance at which the instantaneous PoC equals
    the target; zero if the target is unreachable even at zero miss."""
    if not (0.0 < p_target < 1.0):
        raise RiskError("target probability must be in (0, 1)")
    det = np.linalg.det(np.asarray(P3, float))
    if det <= 0.0:
        raise RiskError("relative position covariance is singular")
    peak = math.sqrt(2.0 / (math.pi * det)) * hbr ** 3 / 3.0
    if p_target >= peak:
        return 0.0
    return -2.0 * math.log(p_target / peak)


# ---------------------------------------------------------------------
# combination rules


def total_poc(probs) -> float:
    """Complement of the joint probability of missing every conjunction."""
    probs = np.asarray(probs, float)
    if np.any((probs < 0) | (probs > 1)):
        raise RiskError("probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - probs))


def total_poc_mixture(weights, probs) -> float:
    """Nested combination over conjunctions and mixture components.

    ``probs[s][c]`` is the probability of component c in conjunction s;
    each enters through its weighted value.
    """
    weights = np.asarray(weights, float)
    acc = 1.0
    for row in probs:
        row = np.asarray(row, float)
        acc *= np.prod(1.0 - weights * row)
    return float(1.0 - acc)


def weighted_smd_limit(p_limit: float, gamma: float, u: float) -> float:
    """Miss-distance limit for one mixture component.

    The component's probability enters the total through its weight, so the
    inversion acts on the de-weighted limit.
    """
    if gamma <= 0.0:
        raise RiskError("component weight must be positive")
    return invert_chan(min(p_limit / gamma, 1.0 - 1e-16), u)


def equivalent_bplane(points: np.ndarray, P2: np.ndarray,
                      d2_limit: float) -> tuple[np.ndarray, float]:
    """Normalize B-plane points so the keep-out ellipse becomes a unit circle.

    Rotates by the eigenvectors of the covariance and stretches by the
    semiaxes of the ellipse at the given miss-distance limit.  Returns the
    transformed points and the circle radius (1 by construction).
    """
    evals, V = np.linalg.eigh(np.asarray(P2, float))
    if np.any(evals <= 0.0) or d2_limit <= 0.0:
        raise RiskError("degenerate keep-out ellipse")
    semiaxes = np.sqrt(evals * d2_limit)
    pts = np.atleast_2d(np.asarray(points, float))
    out = (pts @ V) / semiaxes
    return out, 1.0
