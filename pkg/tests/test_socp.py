import numpy as np
import pytest
import scipy.sparse as sp

from camopt.socp import (
    ConeDims,
    SocpProblem,
    SolverError,
    SolverSettings,
    solve,
)

cvxpy = pytest.importorskip("cvxpy")


def lp_ge(c, lhs, rhs):
    """min c'x s.t. lhs x >= rhs as a standard-form problem."""
    c = np.atleast_1d(np.asarray(c, float))
    lhs = np.atleast_2d(np.asarray(lhs, float))
    rhs = np.atleast_1d(np.asarray(rhs, float))
    return SocpProblem(c=c, A=sp.csc_matrix((0, len(c))), b=np.zeros(0),
                       G=sp.csc_matrix(-lhs), h=-rhs,
                       dims=ConeDims(nonneg=len(rhs)))


def random_feasible(rng, n, p, l, socs):
    m = l + sum(socs)
    A = rng.standard_normal((p, n))
    G = rng.standard_normal((m, n))

    def interior(v):
        v = v.copy()
        v[:l] = np.abs(v[:l]) + 0.1
        off = l
        for q in socs:
            v[off] = np.linalg.norm(v[off + 1:off + q]) + 0.1
            off += q
        return v

    x0 = rng.standard_normal(n)
    s0 = interior(rng.standard_normal(m))
    z0 = interior(rng.standard_normal(m))
    b = A @ x0
    h = G @ x0 + s0
    c = -(G.T @ z0 + A.T @ rng.standard_normal(p))
    return SocpProblem(c=c, A=sp.csc_matrix(A), b=b, G=sp.csc_matrix(G), h=h,
                       dims=ConeDims(nonneg=l, soc=tuple(socs)))


def cvxpy_value(prob: SocpProblem) -> float:
    n = prob.G.shape[1]
    l = prob.dims.nonneg
    G, h = np.asarray(prob.G.todense()), prob.h
    x = cvxpy.Variable(n)
    cons = []
    if l:
        cons.append(G[:l] @ x <= h[:l])
    if prob.A.shape[0]:
        cons.append(np.asarray(prob.A.todense()) @ x == prob.b)
    off = l
    for q in prob.dims.soc:
        cons.append(cvxpy.SOC(h[off] - G[off] @ x,
                              G[off + 1:off + q] @ x - h[off + 1:off + q]))
        off += q
    ref = cvxpy.Problem(cvxpy.Minimize(prob.c @ x), cons)
    ref.solve()
    return ref.value


def cone_margin(v, dims):
    out = np.inf
    if dims.nonneg:
        out = float(np.min(v[:dims.nonneg]))
    off = dims.nonneg
    for q in dims.soc:
        out = min(out, v[off] - np.linalg.norm(v[off + 1:off + q]))
        off += q
    return out


class TestToyProblems:
    def test_scalar_bound(self):
        r = solve(lp_ge([1.0], [[1.0]], [1.0]))
        assert r.status == "optimal"
        assert r.x[0] == pytest.approx(1.0, abs=1e-8)

    def test_fixed_cone_member(self):
        # min t s.t. ||(3,4)|| <= t
        G = sp.csc_matrix(np.array([[-1.0], [0.0], [0.0]]))
        prob = SocpProblem(c=np.array([1.0]), A=sp.csc_matrix((0, 1)),
                           b=np.zeros(0), G=G, h=np.array([0.0, 3.0, 4.0]),
                           dims=ConeDims(nonneg=0, soc=(3,)))
        r = solve(prob)
        assert r.status == "optimal"
        assert r.obj == pytest.approx(5.0, abs=1e-7)

    def test_infeasible_reported(self):
        # x >= 1 and x <= 0
        r = solve(lp_ge([1.0], [[1.0], [-1.0]], [1.0, 0.0]))
        assert r.status == "infeasible"
        assert r.x is None

    def test_unbounded_reported(self):
        # min -x s.t. x >= 0
        r = solve(lp_ge([-1.0], [[1.0]], [0.0]))
        assert r.status == "unbounded"

    def test_equality_lp(self):
        # min x+y s.t. x+y = 1... plus x,y >= 0: any split, obj 1
        prob = SocpProblem(c=np.array([1.0, 2.0]),
                           A=sp.csc_matrix(np.array([[1.0, 1.0]])),
                           b=np.array([1.0]),
                           G=sp.csc_matrix(-np.eye(2)), h=np.zeros(2),
                           dims=ConeDims(nonneg=2))
        r = solve(prob)
        assert r.status == "optimal"
        assert r.x[0] == pytest.approx(1.0, abs=1e-7)
        assert r.obj == pytest.approx(1.0, abs=1e-7)


class TestCrossValidation:
    def test_fifty_random_socps(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(3, 30))
            p = int(rng.integers(0, max(1, n // 3)))
            l = int(rng.integers(1, 8))
            socs = [int(rng.integers(2, 5)) for _ in range(rng.integers(0, 4))]
            prob = random_feasible(rng, n, p, l, socs)
            r = solve(prob)
            ref = cvxpy_value(prob)
            assert r.status == "optimal"
            assert abs(r.obj - ref) / max(1.0, abs(ref)) < 1e-5


class TestInvariants:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.prob = random_feasible(rng, 12, 3, 4, [3, 4])
        self.result = solve(self.prob)

    def test_solution_feasible_outside_solver(self):
        r = self.result
        assert r.status == "optimal"
        assert np.max(np.abs(self.prob.A @ r.x - self.prob.b)) < 1e-8
        s = self.prob.h - self.prob.G @ r.x
        assert cone_margin(s, self.prob.dims) > -1e-8

    def test_duality_gap_reported_small(self):
        assert self.result.gap < 1e-8

    def test_objective_scaling_invariance(self):
        scaled = SocpProblem(c=10.0 * self.prob.c, A=self.prob.A, b=self.prob.b,
                             G=self.prob.G, h=self.prob.h, dims=self.prob.dims)
        r10 = solve(scaled)
        assert np.max(np.abs(r10.x - self.result.x)) < 1e-7

    def test_deterministic(self):
        r2 = solve(self.prob)
        assert np.array_equal(r2.x, self.result.x) or np.max(
            np.abs(r2.x - self.result.x)) == 0.0


class TestDumpFormat:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        prob = random_feasible(rng, 8, 2, 3, [3])
        clone = SocpProblem.load(prob.dump())
        assert np.allclose(clone.c, prob.c)
        assert np.allclose(clone.b, prob.b)
        assert np.allclose(clone.h, prob.h)
        assert np.allclose(np.asarray(clone.G.todense()),
                           np.asarray(prob.G.todense()))
        assert clone.dims == prob.dims
        r1, r2 = solve(prob), solve(clone)
        assert r1.obj == pytest.approx(r2.obj, abs=1e-9)

    def test_bad_header_rejected(self):
        with pytest.raises(SolverError):
            SocpProblem.load("lp 1 0 1 1\n1.0\n")


class TestValidation:
    def test_dimension_mismatch(self):
        prob = lp_ge([1.0], [[1.0]], [1.0])
        prob.h = np.zeros(3)
        with pytest.raises(SolverError):
            solve(prob)

    def test_no_cone_rows_rejected(self):
        prob = SocpProblem(c=np.ones(1), A=sp.csc_matrix((0, 1)), b=np.zeros(0),
                           G=sp.csc_matrix((0, 1)), h=np.zeros(0),
                           dims=ConeDims())
        with pytest.raises(SolverError):
            solve(prob)

    def test_never_crashes_on_hard_problem(self):
        # nearly-degenerate rows: must return a status, not raise
        rng = np.random.default_rng(1)
        G = rng.standard_normal((6, 4))
        G[5] = G[4] + 1e-13
        prob = SocpProblem(c=rng.standard_normal(4),
                           A=sp.csc_matrix((0, 4)), b=np.zeros(0),
                           G=sp.csc_matrix(G), h=np.abs(rng.standard_normal(6)),
                           dims=ConeDims(nonneg=6))
        r = solve(prob, SolverSettings(max_iter=30))
        assert r.status in {"optimal", "infeasible", "unbounded", "max_iter"}
