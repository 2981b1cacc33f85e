"""Equations of motion, adaptive RKF7(8) propagation generic over scalars
and jets, segment linearization, node grids and closest-approach refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dajet import Jet, jet_space, variables, partial_invert, DomainError

GM_EARTH = 398600.4418  # km^3/s^2
R_EARTH = 6378.137  # km
J2_EARTH = 1.08262668e-3


class PropagationError(Exception):
    pass


class StiffnessError(PropagationError):
    pass


class ScenarioError(Exception):
    pass


class DegenerateEncounterError(Exception):
    pass


# ---------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class Dynamics:
    """Point-mass gravity, optionally with the second zonal harmonic.

    ``mu`` and ``r_ref`` are in whatever consistent unit system the caller
    works in (km/s or scaled units).
    """

    mu: float
    j2: float = 0.0
    r_ref: float = 0.0

    @staticmethod
    def two_body(mu: float = GM_EARTH) -> "Dynamics":
        return Dynamics(mu=mu)

    @staticmethod
    def two_body_j2(mu: float = GM_EARTH, j2: float = J2_EARTH,
                    r_ref: float = R_EARTH) -> "Dynamics":
        return Dynamics(mu=mu, j2=j2, r_ref=r_ref)


def _sqrt(x):
    return x.sqrt() if isinstance(x, Jet) else math.sqrt(x)


def _const(x):
    return x.const if isinstance(x, Jet) else float(x)


def eom(y, u, dyn: Dynamics):
    """State derivative [v; g(r) + u]; same formula for floats and jets."""
    rx, ry, rz, vx, vy, vz = y
    r2 = rx * rx + ry * ry + rz * rz
    if _const(r2) <= 0.0:
        raise DomainError("zero radius in equations of motion")
    rn = _sqrt(r2)
    ir3 = 1.0 / (r2 * rn)
    k = -dyn.mu * ir3
    ax, ay, az = k * rx, k * ry, k * rz
    if dyn.j2:
        # -(3/2) J2 mu R^2 / r^5 * [x(1-5z^2/r^2); y(1-5z^2/r^2); z(3-5z^2/r^2)]
        ir2 = 1.0 / r2
        z2r2 = rz * rz * ir2
        kj = -1.5 * dyn.j2 * dyn.mu * dyn.r_ref ** 2 * ir3 * ir2
        f1 = kj * (1.0 - 5.0 * z2r2)
        ax = ax + f1 * rx
        ay = ay + f1 * ry
        az = az + kj * (3.0 - 5.0 * z2r2) * rz
    out = np.empty(6, dtype=object if isinstance(rx, Jet) else float)
    out[0], out[1], out[2] = vx, vy, vz
    out[3], out[4], out[5] = ax + u[0], ay + u[1], az + u[2]
    return out


# ---------------------------------------------------------------------
# RKF7(8) tableau (Fehlberg)

_A = np.zeros((13, 12))
_C8 = np.zeros(13)
_ALPHA = np.zeros(13)
_C8[5] = 34.0 / 105
_C8[6] = _C8[7] = 9.0 / 35
_C8[8] = _C8[9] = 9.0 / 280
_C8[11] = _C8[12] = 41.0 / 840
_ALPHA[1:13] = [2 / 27, 1 / 9, 1 / 6, 5 / 12, 0.5, 5 / 6, 1 / 6, 2 / 3,
                1 / 3, 1.0, 0.0, 1.0]
_A[1, 0] = 2 / 27
_A[2, :2] = [1 / 36, 1 / 12]
_A[3, :3] = [1 / 24, 0, 1 / 8]
_A[4, :4] = [5 / 12, 0, -25 / 16, 25 / 16]
_A[5, :5] = [0.05, 0, 0, 0.25, 0.2]
_A[6, :6] = [-25 / 108, 0, 0, 125 / 108, -65 / 27, 125 / 54]
_A[7, :7] = [31 / 300, 0, 0, 0, 61 / 225, -2 / 9, 13 / 900]
_A[8, :8] = [2.0, 0, 0, -53 / 6, 704 / 45, -107 / 9, 67 / 90, 3.0]
_A[9, :9] = [-91 / 108, 0, 0, 23 / 108, -976 / 135, 311 / 54, -19 / 60,
             17 / 6, -1 / 12]
_A[10, :10] = [2383 / 4100, 0, 0, -341 / 164, 4496 / 1025, -301 / 82,
               2133 / 4100, 45 / 82, 45 / 164, 18 / 41]
_A[11, :11] = [3 / 205, 0, 0, 0, 0, -6 / 41, -3 / 205, -3 / 41, 3 / 41,
               6 / 41, 0]
_A[12, :12] = [-1777 / 4100, 0, 0, -341 / 164, 4496 / 1025, -289 / 82,
               2193 / 4100, 51 / 82, 33 / 164, 12 / 41, 0, 1.0]
_ERR_W = 41.0 / 840  # on f0 + f10 - f11 - f12


def _mag(x) -> float:
    if isinstance(x, Jet):
        return float(np.max(np.abs(x.coeffs)))
    return abs(float(x))


def propagate(y0, t0: float, t1: float, deriv, tol: float = 1e-12,
              h0: float | None = None, max_steps: int = 100000):
    """Adaptive RKF7(8) from t0 to t1; ``deriv(t, y)`` gives the derivative.

    Works on float arrays and on object arrays of jets.  The local error
    per step is kept below ``tol`` (max-norm over components, including
    jet coefficients).
    """
    if t1 < t0:
        raise PropagationError("backward integration not supported; flip the derivative")
    if tol <= 0:
        raise PropagationError("tolerance must be positive")
    y = np.array(y0, dtype=object if isinstance(y0[0], Jet) else float)
    t = t0
    span = t1 - t0
    if span == 0.0:
        return y
    h = h0 if h0 is not None else span
    h = min(h, span)
    f = [None] * 13
    for _ in range(max_steps):
        if t >= t1:
            return y
        h = min(h, t1 - t)
        f[0] = deriv(t, y)
        while True:
            for k in range(1, 13):
                acc = y.copy()
                for j in range(k):
                    a = _A[k, j]
                    if a != 0.0:
                        acc = acc + (h * a) * f[j]
                f[k] = deriv(t + _ALPHA[k] * h, acc)
            ecomb = f[0] + f[10] - f[11] - f[12]
            err = max(_mag(c) for c in ecomb) * abs(_ERR_W * h)
            if err <= tol or h <= 1e-14 * max(abs(t), 1.0):
                break
            h *= max(0.2, 0.8 * (tol / err) ** 0.125)
            if h < 1e-13 * max(span, 1.0):
                raise StiffnessError(f"step size underflow at t={t}")
        ynew = y.copy()
        for k in range(13):
            if _C8[k] != 0.0:
                ynew = ynew + (h * _C8[k]) * f[k]
        y = ynew
        t += h
        if err > 0:
            h *= min(5.0, 0.8 * (tol / err) ** 0.125)
    raise StiffnessError("maximum number of steps exceeded")


def flow(y0, t0, t1, u, dyn: Dynamics, tol: float = 1e-12):
    """Propagate under constant control ``u`` over [t0, t1].

    Backward spans are handled by integrating the time-reversed system
    (velocity flipped, which flips the sign of every acceleration term).
    """
    if t1 < t0:
        # gravity is reversible: flipping the velocity and integrating the
        # plain equations forward retraces the trajectory
        yr = np.concatenate([y0[:3], -np.asarray(y0[3:])])
        out = propagate(yr, 0.0, t0 - t1, lambda t, z: eom(z, u, dyn), tol=tol)
        return np.concatenate([out[:3], -out[3:]])
    return propagate(y0, t0, t1, lambda t, y: eom(y, u, dyn), tol=tol)


# ---------------------------------------------------------------------
# segment linearization


@dataclass
class SegmentMaps:
    """First-order transition maps of one discretization segment.

    ``A`` (6x6) and ``B`` (6x3) map state and control perturbations at the
    start node to state perturbations at the end node; ``c`` is the
    linearization residual so that A x + B u + c reproduces the reference
    endpoint exactly.  ``xi`` holds the per-variable nonlinearity ratios
    (6 state + 3 control entries) used to size trust regions.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    xbar: np.ndarray
    xi: np.ndarray


def linearize_segment(x: np.ndarray, u: np.ndarray, dt: float, dyn: Dynamics,
                      tol: float = 1e-12) -> SegmentMaps:
    """Second-order jet propagation of (x + dx, u + du) over one segment."""
    if dt <= 0:
        raise PropagationError("segment duration must be positive")
    sp = jet_space(9, 2)
    xu = variables(sp, np.concatenate([np.asarray(x, float), np.asarray(u, float)]))
    yj = np.array(xu[:6], dtype=object)
    uj = xu[6:9]
    yend = propagate(yj, 0.0, dt, lambda t, y: eom(y, uj, dyn), tol=tol)

    xbar = np.array([yend[i].const for i in range(6)])
    G = np.array([yend[i].gradient() for i in range(6)])  # 6 x 9
    A, B = G[:, :6], G[:, 6:9]
    c = xbar - A @ np.asarray(x, float) - B @ np.asarray(u, float)

    # nonlinearity ratio per input variable: norm over outputs and partners
    # of the second-derivative coefficients, over the first-order map norm
    H = np.array([yend[i].hessian() for i in range(6)])  # 6 x 9 x 9
    g1 = np.linalg.norm(G)
    if g1 == 0.0:
        xi = np.zeros(9)
    else:
        xi = np.sqrt((H ** 2).sum(axis=(0, 1))) / g1
    return SegmentMaps(A=A, B=B, c=c, xbar=xbar, xi=xi)


# ---------------------------------------------------------------------
# node grid


@dataclass
class NodeGrid:
    """Discretization epochs with conjunction/mixand anchors.

    ``conjunction_nodes`` maps (conjunction index, mixand index) to the
    node whose epoch is that pair's refined closest approach.
    """

    times: np.ndarray
    conjunction_nodes: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_segments(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)


def build_grid(t0: float, tf: float, period: float, nodes_per_orbit: int,
               tca_epochs: dict[tuple[int, int], float] | None = None,
               merge_tol: float = 1e-6) -> NodeGrid:
    """Uniform grid at period/nodes_per_orbit with nodes inserted at TCAs."""
    if nodes_per_orbit < 8:
        raise ScenarioError("nodes_per_orbit must be >= 8")
    if tf <= t0:
        raise ScenarioError("empty horizon")
    tca_epochs = tca_epochs or {}
    for key, tca in tca_epochs.items():
        if not (t0 <= tca <= tf):
            raise ScenarioError(f"TCA of {key} at {tca} outside horizon [{t0}, {tf}]")
    step = period / nodes_per_orbit
    n = int(math.ceil((tf - t0) / step - 1e-9))
    times = list(t0 + np.arange(n + 1) * (tf - t0) / n)
    for tca in sorted(set(tca_epochs.values())):
        k = int(np.argmin(np.abs(np.asarray(times) - tca)))
        if abs(times[k] - tca) > merge_tol:
            times.append(tca)
    times = np.array(sorted(times))
    grid = NodeGrid(times=times)
    for key, tca in tca_epochs.items():
        k = int(np.argmin(np.abs(times - tca)))
        grid.conjunction_nodes[key] = k
    return grid


# ---------------------------------------------------------------------
# closest-approach refinement


def _time_jets(y: np.ndarray, deriv, order: int = 2):
    """Taylor expansion of the flow in a single time variable.

    Returns a length-6 object array of jets in dt around the input state:
    y + f dt + (df/dt) dt^2/2.
    """
    sp = jet_space(1, order)
    t = Jet.variable(sp, 0)
    f0 = deriv(0.0, y)
    yl = np.array([Jet.constant(sp, y[i]) + f0[i] * t for i in range(6)], dtype=object)
    out = np.array([Jet.constant(sp, y[i]) + f0[i] * t for i in range(6)], dtype=object)
    if order >= 2:
        f1 = deriv(0.0, yl)  # jets: f0 + (Jf f0) dt
        for i in range(6):
            fdot = f1[i].gradient()[0]
            out[i] = out[i] + (0.5 * fdot) * (t * t)
    return out


def refine_tca(xp: np.ndarray, xs: np.ndarray, dyn_p: Dynamics,
               dyn_s: Dynamics | None = None, tol: float = 1e-6,
               max_iter: int = 12) -> float:
    """Time offset from the nominal epoch to the true closest approach.

    Solves dr(dt) . dv(dt) = 0 by expanding both flows in a time jet and
    partially inverting the polynomial, iterating until the offset is
    stationary.
    """
    dyn_s = dyn_s or dyn_p
    xp = np.asarray(xp, float).copy()
    xs = np.asarray(xs, float).copy()
    dv0 = xp[3:] - xs[3:]
    if np.linalg.norm(dv0) == 0.0:
        raise DegenerateEncounterError("zero relative velocity at nominal epoch")

    dt_total = 0.0
    for _ in range(max_iter):
        jp = _time_jets(xp, lambda t, y: eom(y, (0.0, 0.0, 0.0), dyn_p))
        js = _time_jets(xs, lambda t, y: eom(y, (0.0, 0.0, 0.0), dyn_s))
        dr = jp[:3] - js[:3]
        dv = jp[3:] - js[3:]
        g = dr[0] * dv[0] + dr[1] * dv[1] + dr[2] * dv[2]
        gdot = g.gradient()[0]
        if gdot == 0.0:
            raise DegenerateEncounterError("stationary miss-distance equation")
        inv = partial_invert(g, 0)
        step = inv.eval([-g.const])
        dt_total += step
        if abs(step) <= tol:
            return dt_total
        if step > 0:
            xp = flow(xp, 0.0, step, (0, 0, 0), dyn_p)
            xs = flow(xs, 0.0, step, (0, 0, 0), dyn_s)
        else:
            # integrate the time-reversed system for negative offsets
            xp = _flow_back(xp, -step, dyn_p)
            xs = _flow_back(xs, -step, dyn_s)
    return dt_total


def _flow_back(y: np.ndarray, dt_back: float, dyn: Dynamics) -> np.ndarray:
    return flow(y, dt_back, 0.0, np.zeros(3), dyn)
