"""Scenario ingestion, frames, and unit scaling.

A scenario file is a single JSON document holding the primary's orbit and
actuator limits, a list of conjunction records (TCA, relative state and
combined covariance in the primary's RTN frame at TCA, combined hard-body
radius) and mode flags.  The loader rotates the relative state and the
covariance into ECI once, using the primary's ballistic RTN frame at each
TCA, so everything downstream is frame free.  Internally units are km,
km/s and seconds past t0; the solver additionally works in canonical
units where the primary's semi-major axis and the circular speed at it
are both 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .astro import Dynamics, GM_EARTH, flow


class ScenarioFormatError(Exception):
    """Raised for schema violations; message carries the JSON field path."""


SCHEMA_VERSION = 1

# keys of the lower-triangular position covariance block; the off-diagonal
# values fill the upper triangle in row-major order (rt, rn, tn)
_POS_KEYS = ("P_rr", "P_tt", "P_nn", "P_rt", "P_tn", "P_nr")
_VEL_KEYS = ("P_rdot_rdot", "P_tdot_tdot", "P_ndot_ndot")


# ---------------------------------------------------------------------
# frames and elements


def rtn_matrix(state: np.ndarray) -> np.ndarray:
    """Columns are the RTN unit vectors of the owning state in ECI, so that
    v_eci = M @ v_rtn."""
    r = np.asarray(state[:3], float)
    v = np.asarray(state[3:6], float)
    rhat = r / np.linalg.norm(r)
    h = np.cross(r, v)
    nhat = h / np.linalg.norm(h)
    that = np.cross(nhat, rhat)
    return np.column_stack([rhat, that, nhat])


def rtn_to_eci(vec: np.ndarray, state: np.ndarray) -> np.ndarray:
    return rtn_matrix(state) @ np.asarray(vec, float)


def eci_to_rtn(vec: np.ndarray, state: np.ndarray) -> np.ndarray:
    return rtn_matrix(state).T @ np.asarray(vec, float)


def rotate_cov(cov: np.ndarray, state: np.ndarray) -> np.ndarray:
    """RTN covariance (3x3 or 6x6) of the owning state into ECI."""
    M = rtn_matrix(state)
    cov = np.asarray(cov, float)
    if cov.shape == (3, 3):
        return M @ cov @ M.T
    R = np.zeros((6, 6))
    R[:3, :3] = M
    R[3:, 3:] = M
    return R @ cov @ R.T


def elements_to_state(a: float, e: float, inc: float, raan: float,
                      argp: float, nu: float, mu: float = GM_EARTH) -> np.ndarray:
    """Classical elements (angles in radians) to a Cartesian ECI state."""
    p = a * (1.0 - e ** 2)
    r = p / (1.0 + e * math.cos(nu))
    r_pf = np.array([r * math.cos(nu), r * math.sin(nu), 0.0])
    v_pf = math.sqrt(mu / p) * np.array([-math.sin(nu), e + math.cos(nu), 0.0])
    cO, sO = math.cos(raan), math.sin(raan)
    co, so = math.cos(argp), math.sin(argp)
    ci, si = math.cos(inc), math.sin(inc)
    R = np.array([
        [cO * co - sO * so * ci, -cO * so - sO * co * ci, sO * si],
        [sO * co + cO * so * ci, -sO * so + cO * co * ci, -cO * si],
        [so * si, co * si, ci],
    ])
    return np.concatenate([R @ r_pf, R @ v_pf])


# ---------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class Scaling:
    """Canonical units built on the primary's semi-major axis."""

    length: float  # km
    velocity: float  # km/s
    time: float  # s
    acceleration: float  # km/s^2

    @classmethod
    def from_sma(cls, a_p: float, mu: float = GM_EARTH) -> "Scaling":
        if a_p <= 0:
            raise ScenarioFormatError("semi-major axis must be positive")
        return cls(length=a_p, velocity=math.sqrt(mu / a_p),
                   time=math.sqrt(a_p ** 3 / mu), acceleration=mu / a_p ** 2)

    def _factor(self, kind: str) -> float:
        try:
            return getattr(self, kind)
        except AttributeError:
            raise ScenarioFormatError(f"unknown scaling kind: {kind!r}")

    def scale(self, value, kind: str):
        return np.asarray(value, float) / self._factor(kind)

    def unscale(self, value, kind: str):
        return np.asarray(value, float) * self._factor(kind)


# ---------------------------------------------------------------------
# scenario data


@dataclass
class Conjunction:
    """One predicted close approach. dr/dv follow the primary-minus-secondary
    convention so the secondary state is x_p(tca) - [dr, dv].  All members
    are ECI; the loader has already rotated the file's RTN quantities."""

    tca: float  # s past t0
    dr: np.ndarray  # km, ECI
    dv: np.ndarray  # km/s, ECI
    cov: np.ndarray  # 3x3 or 6x6 combined covariance, km^2 blocks, ECI
    hbr: float  # km, combined hard-body radius


@dataclass
class Scenario:
    mu: float
    dynamics: Dynamics
    x_primary: np.ndarray  # ECI state at state_epoch [km, km/s]
    state_epoch: float  # s past t0
    u_max: float  # km/s^2
    mass: float  # kg
    horizon: tuple  # (t0, tf) in s past t0
    short_term: bool
    long_term: bool
    n_mix: int
    conjunctions: list
    name: str = ""
    integ_tol: float = 1e-12

    @property
    def sma(self) -> float:
        r, v = self.x_primary[:3], self.x_primary[3:]
        energy = 0.5 * v @ v - self.mu / np.linalg.norm(r)
        return -self.mu / (2.0 * energy)

    @property
    def period(self) -> float:
        return 2.0 * math.pi * math.sqrt(self.sma ** 3 / self.mu)

    def scaling(self) -> Scaling:
        return Scaling.from_sma(self.sma, self.mu)

    def primary_at(self, t: float) -> np.ndarray:
        """Primary ballistic state at epoch t [s past t0]."""
        return flow(self.x_primary, self.state_epoch, t, np.zeros(3),
                    self.dynamics, tol=self.integ_tol)

    def secondary_at_tca(self, conj: Conjunction) -> np.ndarray:
        xp = self.primary_at(conj.tca)
        return xp - np.concatenate([conj.dr, conj.dv])


@dataclass
class Config:
    nodes_per_orbit: int = 60
    total_limit: float = 1e-6
    major_tol: float = 1e-3  # scaled acceleration
    minor_tol: float = 1e-6  # scaled position
    kappa_vc: float = 1e4
    nu_bar: float = 1e-2
    integ_tol: float = 1e-12
    max_major: int = 30
    max_minor: int = 30
    limit_floor: float = 1e-9
    alpha_cap: float = 10.0
    active_eps: float = 1e-2  # activity test in the limit-adaptation NLP
    refine_mode: str = "smd"  # {"smd", "tpoc"}
    short_circuit: bool = False  # skip refinement if already within 2%
    short_circuit_margin: float = 0.02

    def validated(self) -> "Config":
        if self.nodes_per_orbit < 8:
            raise ScenarioFormatError("nodes_per_orbit must be >= 8")
        for name in ("total_limit", "major_tol", "minor_tol", "kappa_vc",
                     "nu_bar", "integ_tol", "limit_floor"):
            if getattr(self, name) <= 0:
                raise ScenarioFormatError(f"config.{name} must be positive")
        if self.refine_mode not in ("smd", "tpoc"):
            raise ScenarioFormatError("refine_mode must be 'smd' or 'tpoc'")
        return self


# ---------------------------------------------------------------------
# JSON loading


def _get(obj, key, path, typ=None):
    if key not in obj:
        raise ScenarioFormatError(f"missing field {path}.{key}")
    val = obj[key]
    if typ is not None and not isinstance(val, typ):
        raise ScenarioFormatError(f"field {path}.{key} has wrong type")
    return val


def _vector(obj, key, path, n):
    v = _get(obj, key, path, list)
    if len(v) != n or not all(isinstance(x, (int, float)) for x in v):
        raise ScenarioFormatError(f"field {path}.{key} must be {n} numbers")
    return np.array(v, float)


def _covariance(entry, path):
    """Triangular RTN entries to a symmetric matrix; the off-diagonal values
    fill the upper triangle row by row.  The velocity block (diagonal entries
    only) is optional.  Tiny negative eigenvalues from rounded inputs are
    clipped to zero; anything worse is rejected."""
    vals = {k: _get(entry, k, path, (int, float)) for k in _POS_KEYS}
    P = np.array([
        [vals["P_rr"], vals["P_rt"], vals["P_tn"]],
        [vals["P_rt"], vals["P_tt"], vals["P_nr"]],
        [vals["P_tn"], vals["P_nr"], vals["P_nn"]],
    ])
    if any(k in entry for k in _VEL_KEYS):
        full = np.zeros((6, 6))
        full[:3, :3] = P
        for j, k in enumerate(_VEL_KEYS):
            full[3 + j, 3 + j] = _get(entry, k, path, (int, float))
        P = full
    evals, vecs = np.linalg.eigh(P)
    scale = max(1e-300, np.max(np.abs(evals)))
    if evals[0] < -1e-6 * scale:
        raise ScenarioFormatError(f"covariance at {path} is not PSD")
    if evals[0] < 0.0:
        P = (vecs * np.clip(evals, 0.0, None)) @ vecs.T
    return P


def _primary_state(prim, mu):
    if "state" in prim:
        st = prim["state"]
        return np.concatenate([_vector(st, "r_km", "primary.state", 3),
                               _vector(st, "v_km_s", "primary.state", 3)])
    if "elements" in prim:
        el = prim["elements"]
        return elements_to_state(
            _get(el, "a_km", "primary.elements", (int, float)),
            _get(el, "e", "primary.elements", (int, float)),
            math.radians(_get(el, "i_deg", "primary.elements", (int, float))),
            math.radians(el.get("raan_deg", 0.0)),
            math.radians(el.get("argp_deg", 0.0)),
            math.radians(el.get("nu_deg", 0.0)), mu)
    raise ScenarioFormatError("primary needs either 'state' or 'elements'")


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(f"invalid JSON: {exc}") from exc

    if doc.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ScenarioFormatError("unsupported schema version")
    mu = float(doc.get("mu_km3_s2", GM_EARTH))
    dyn_name = doc.get("dynamics", "two_body")
    if dyn_name == "two_body":
        dynamics = Dynamics.two_body(mu)
    elif dyn_name == "j2":
        dynamics = Dynamics.two_body_j2(mu)
    else:
        raise ScenarioFormatError(f"unknown dynamics model {dyn_name!r}")

    prim = _get(doc, "primary", "$", dict)
    x_p = _primary_state(prim, mu)
    u_max = _get(prim, "u_max_mm_s2", "primary", (int, float)) * 1e-6  # km/s^2
    mass = prim.get("mass_kg", 0.0)
    state_epoch = float(prim.get("state_epoch_s", doc.get("horizon_s", [0])[0]))

    horizon = _vector(doc, "horizon_s", "$", 2)
    mode = doc.get("mode", {})
    short_term = bool(mode.get("short_term", True))
    long_term = bool(mode.get("long_term", False))
    n_mix = int(mode.get("n_mix", 1))
    if n_mix < 1 or n_mix % 2 == 0:
        raise ScenarioFormatError("mode.n_mix must be odd and positive")

    raw = []
    for idx, entry in enumerate(doc.get("conjunctions", [])):
        path = f"conjunctions[{idx}]"
        tca = _get(entry, "tca_s", path, (int, float))
        if not horizon[0] <= tca <= horizon[1]:
            raise ScenarioFormatError(f"{path}.tca_s outside horizon")
        dr = _vector(entry, "dr_m", path, 3) * 1e-3
        dv = _vector(entry, "dv_km_s", path, 3)
        cov = _covariance(_get(entry, "cov_rtn_km2", path, dict),
                          f"{path}.cov_rtn_km2")
        hbr = _get(entry, "hbr_m", path, (int, float)) * 1e-3
        if hbr <= 0:
            raise ScenarioFormatError(f"{path}.hbr_m must be positive")
        raw.append((idx, float(tca), dr, dv, cov, float(hbr)))

    # rotate each record from the primary's RTN at its TCA into ECI,
    # propagating the primary once through the sorted TCAs
    conjunctions = [None] * len(raw)
    x_cur, t_cur = x_p, state_epoch
    for idx, tca, dr, dv, cov, hbr in sorted(raw, key=lambda r: r[1]):
        x_cur = flow(x_cur, t_cur, tca, np.zeros(3), dynamics)
        t_cur = tca
        M = rtn_matrix(x_cur)
        conjunctions[idx] = Conjunction(
            tca=tca, dr=M @ dr, dv=M @ dv, cov=rotate_cov(cov, x_cur),
            hbr=hbr)

    return Scenario(mu=mu, dynamics=dynamics, x_primary=x_p,
                    state_epoch=state_epoch, u_max=u_max, mass=mass,
                    horizon=(float(horizon[0]), float(horizon[1])),
                    short_term=short_term, long_term=long_term, n_mix=n_mix,
                    conjunctions=conjunctions, name=doc.get("name", ""))


def scaled_dynamics(scenario: Scenario) -> Dynamics:
    """Dynamics in canonical units (mu = 1, lengths in primary sma)."""
    sc = scenario.scaling()
    return replace(scenario.dynamics, mu=1.0,
                   r_ref=scenario.dynamics.r_ref / sc.length)
