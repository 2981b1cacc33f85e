import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camopt.scenario import Config, load_scenario
from camopt.scp import (
    ScpError,
    _cheapest_exit,
    _exit_table,
    _select_anchors,
    _table_cost,
    adapt_limits,
    solve,
)

CASE1 = "scenarios/case1.json"


def two_cdm():
    sc = load_scenario(CASE1)
    return dataclasses.replace(sc, conjunctions=sc.conjunctions[:2],
                               horizon=(0.0, 7460.0))


@pytest.fixture(scope="module")
def sol2():
    return solve(two_cdm(), Config())


# ---------------------------------------------------------------------
# probability budget allocation


def log_rho(scale):
    # displacement grows as the limit shrinks, a typical monotone shape
    return lambda q: scale * max(0.0, -math.log10(q) - 3.0)


class TestAdaptLimits:
    def test_single_channel_gets_whole_budget(self):
        q = adapt_limits(np.array([1e-4]), [log_rho(1.0)], 1e-6)
        assert q == pytest.approx([1e-6])

    def test_two_channel_split_matches_grid_search(self):
        # oracle: eliminate q2 through the identity and scan q1 densely
        fns = [log_rho(1.0), log_rho(3.0)]
        p0 = np.array([1e-4, 2e-4])
        total = 1e-6
        q = adapt_limits(p0, fns, total)
        best = math.inf
        for y in np.linspace(-9.0, math.log10(total), 4001):
            q1 = 10.0 ** y
            q2 = 1.0 - (1.0 - total) / (1.0 - q1)
            if q2 < 1e-9:
                continue
            best = min(best, fns[0](q1) + fns[1](q2))
        got = fns[0](q[0]) + fns[1](q[1])
        assert got <= best * (1.0 + 1e-2) + 1e-12

    def test_cheap_channel_releases_budget(self):
        # a channel that never needs displacement should not hold budget
        # that the expensive one can spend
        fns = [lambda q: 0.0, log_rho(1.0)]
        q = adapt_limits(np.array([1e-8, 1e-4]), fns, 1e-6)
        assert q[1] > 0.9e-6

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 500), n=st.integers(2, 6))
    def test_product_identity_holds(self, seed, n):
        rng = np.random.default_rng(seed)
        p0 = 10.0 ** rng.uniform(-8.0, -4.0, n)
        fns = [log_rho(s) for s in rng.uniform(0.5, 4.0, n)]
        total = 1e-6
        q = adapt_limits(p0, fns, total)
        assert abs(np.prod(1.0 - q) - (1.0 - total)) <= 1e-10
        assert np.all(q >= 1e-9 * (1.0 - 1e-12))

    def test_floor_too_large_rejected(self):
        fns = [log_rho(1.0)] * 3
        with pytest.raises(ScpError):
            adapt_limits(np.full(3, 1e-5), fns, 1e-9, floor=1e-9)


# ---------------------------------------------------------------------
# exit anchors


def random_geometry(rng, inside=True):
    A = rng.standard_normal((3, 3))
    P = A @ A.T + 0.5 * np.eye(3)
    d2 = 9.0
    g = rng.standard_normal(3)
    # fixed Mahalanobis radius, well inside or well outside the ellipsoid
    f = 0.3 if inside else 2.0
    y0 = np.linalg.cholesky(P) @ (g / np.linalg.norm(g)) * f * math.sqrt(d2)
    M = rng.standard_normal((4, 3, 3))
    return y0, P, d2, M


class TestExitAnchors:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_table_cost_matches_direct_recompute(self):
        y0, P, d2, M = random_geometry(self.rng)
        Z1, Nn, b, a, s = _exit_table(y0, P, M)
        # direct route: for each tangent plane, the displacement needed
        # along its normal divided by the best single-segment response
        need = np.maximum(math.sqrt(d2) * b - a, 0.0)
        resp = np.array([max(np.linalg.norm(Mi.T @ n) for Mi in M)
                         for n in Nn])
        direct = float(np.min(need / resp))
        assert _table_cost((Z1, Nn, b, a, s), d2) == pytest.approx(direct)

    def test_anchor_lies_on_the_keepout_boundary(self):
        y0, P, d2, M = random_geometry(self.rng)
        z = _cheapest_exit(y0, P, d2, M)
        assert z @ np.linalg.solve(P, z) == pytest.approx(d2, rel=1e-9)

    def test_outside_point_costs_nothing(self):
        y0, P, d2, M = random_geometry(self.rng, inside=False)
        assert y0 @ np.linalg.solve(P, y0) > d2
        table = _exit_table(y0, P, M)
        assert _table_cost(table, d2) <= 1e-6 * math.sqrt(d2)

    def test_side_filter_flips_the_cut(self):
        y0, P, d2, M = random_geometry(self.rng)
        side = np.array([1.0, 0.0, 0.0])
        za = _cheapest_exit(y0, P, d2, M, side=side)
        zb = _cheapest_exit(y0, P, d2, M, side=-side)
        assert np.linalg.norm(za - zb) > 0.0

    def test_joint_selection_of_one_matches_solo(self):
        y0, P, d2, M = random_geometry(self.rng)
        caps = np.full(len(M), 1e9)
        anchors, normals = _select_anchors([(y0, P, d2, M)], caps)
        solo = _cheapest_exit(y0, P, d2, M)
        assert anchors[0] == pytest.approx(solo)
        assert np.linalg.norm(normals[0]) == pytest.approx(1.0)

    def test_identical_channels_share_the_ride(self):
        # the second copy prices its cuts against the planned displacement
        # and must find the shared side free of charge
        y0, P, d2, M = random_geometry(self.rng)
        caps = np.full(len(M), 1e9)
        item = (y0, P, d2, M)
        anchors, normals = _select_anchors([item, item], caps)
        assert anchors[0] == pytest.approx(anchors[1])
        assert normals[0] == pytest.approx(normals[1])


# ---------------------------------------------------------------------
# end-to-end solver behavior on the truncated two-conjunction case


class TestSolve:
    def test_no_maneuver_when_budget_is_loose(self):
        res = solve(two_cdm(), Config(total_limit=0.05))
        assert res.status == "converged"
        assert res.dv_mm_s <= 1e-3
        assert res.tpoc_final <= 0.05

    def test_converges_and_respects_budget(self, sol2):
        assert sol2.status == "converged"
        assert sol2.tpoc_final <= 1.05e-6
        assert sol2.tpoc_ballistic > 1e-6

    def test_virtual_control_vanishes(self, sol2):
        assert abs(sol2.vc_max) <= 1e-7

    def test_dv_recomputes_from_controls(self, sol2):
        dts = np.diff(sol2.times_s)
        dv = float(np.sum(np.linalg.norm(sol2.controls_km_s2, axis=1) * dts))
        assert dv * 1e6 == pytest.approx(sol2.dv_mm_s, rel=1e-9)

    def test_channel_limits_multiply_to_budget(self, sol2):
        q = np.array([ch.p_limit for ch in sol2.channels])
        assert abs(np.prod(1.0 - q) - (1.0 - 1e-6)) <= 1e-10

    def test_thrust_respects_the_cap(self, sol2):
        sc = two_cdm()
        acc = np.linalg.norm(sol2.controls_km_s2, axis=1)
        assert np.max(acc) <= sc.u_max * (1.0 + 1e-9)

    def test_deterministic(self, sol2):
        again = solve(two_cdm(), Config())
        assert again.dv_mm_s == sol2.dv_mm_s
        assert np.array_equal(again.u_frac, sol2.u_frac)

    def test_final_states_follow_the_nonlinear_flow(self, sol2):
        # validation error is quoted in mm
        assert sol2.e_validation_mm <= 5.0
