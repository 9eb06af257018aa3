import numpy as np
import pytest

from edfnet.grids import Grid, MeasurePath
from edfnet.reflection import (
    CheckResult,
    NonConvergenceError,
    PreconditionError,
    RoutingMatrix,
    check_monotonicity,
    check_nonanticipation,
    lipschitz_ratio,
    oblique_reflection,
    skorokhod_1d,
    solve_soft_fluid,
)

T_NODES = np.linspace(0.0, 1.0, 201)


def random_routing(rng: np.random.Generator, K: int) -> RoutingMatrix:
    P = rng.uniform(0.0, 1.0, (K, K))
    P *= rng.uniform(0.1, 0.9) / np.maximum(P.sum(axis=1, keepdims=True), 1e-9)
    return RoutingMatrix.certify(P)


def random_paths(rng: np.random.Generator, K: int, n: int) -> np.ndarray:
    start = rng.uniform(0.0, 1.0, (K, 1))
    steps = rng.normal(0.0, 0.2, (K, n))
    return np.concatenate([start, start + np.cumsum(steps, axis=1)], axis=1)


class TestRoutingMatrix:
    def test_certifies_strictly_convergent(self):
        rm = RoutingMatrix.certify(np.array([[0.0, 0.5], [0.25, 0.0]]))
        assert rm.spectral_radius_bound < 1.0
        assert rm.lipschitz_bound >= 1.0
        np.testing.assert_allclose(rm.R, np.array([[1.0, -0.25], [-0.5, 1.0]]))

    def test_rejects_superstochastic(self):
        with pytest.raises(PreconditionError, match="substochastic"):
            RoutingMatrix.certify(np.array([[0.7, 0.5], [0.0, 0.0]]))

    def test_rejects_negative(self):
        with pytest.raises(PreconditionError):
            RoutingMatrix.certify(np.array([[-0.1, 0.0], [0.0, 0.0]]))

    def test_rejects_spectral_radius_one(self):
        with pytest.raises(PreconditionError):
            RoutingMatrix.certify(np.array([[0.0, 1.0], [1.0, 0.0]]))


class TestSkorokhod1d:
    def test_positive_drift_never_reflects(self):
        z, y = skorokhod_1d(T_NODES)
        np.testing.assert_array_equal(z, T_NODES)
        np.testing.assert_array_equal(y, 0.0 * T_NODES)

    def test_pure_reflection(self):
        z, y = skorokhod_1d(-T_NODES)
        np.testing.assert_array_equal(z, np.zeros_like(T_NODES))
        np.testing.assert_array_equal(y, T_NODES)

    def test_crossing_path_matches_running_max_formula(self):
        u = 1.0 - 2.0 * T_NODES
        z, y = skorokhod_1d(u)
        np.testing.assert_allclose(y, np.maximum(0.0, 2.0 * T_NODES - 1.0), atol=1e-15)
        np.testing.assert_allclose(z, np.maximum(1.0 - 2.0 * T_NODES, 0.0), atol=1e-15)

    def test_flat_off_boundary_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            u = random_paths(rng, 1, 100)[0]
            z, y = skorokhod_1d(u)
            dy = np.diff(y, prepend=0.0)
            assert np.all(z[dy > 0.0] == 0.0)

    def test_negative_start_rejected(self):
        with pytest.raises(PreconditionError):
            skorokhod_1d(np.array([-0.5, 0.0, 0.5]))


class TestObliqueReflection:
    def test_zero_input(self):
        rm = RoutingMatrix.certify(np.array([[0.0, 0.5], [0.25, 0.0]]))
        ref = oblique_reflection(np.zeros((2, 50)), rm)
        assert np.all(ref.z == 0.0) and np.all(ref.y == 0.0)

    def test_decoupled_equals_scalar_map(self):
        rng = np.random.default_rng(1)
        rm = RoutingMatrix.certify(np.zeros((3, 3)))
        u = random_paths(rng, 3, 120)
        ref = oblique_reflection(u, rm)
        for i in range(3):
            z_i, y_i = skorokhod_1d(u[i])
            assert np.array_equal(ref.z[i], z_i)
            assert np.array_equal(ref.y[i], y_i)

    def test_feedforward_two_nodes_matches_hand_composition(self):
        # Node 1 routes half its output to node 2.  With u1 = -t the first
        # regulator is y1 = t; the downstream problem then reduces to the
        # scalar map applied to u2 - 0.5 * y1, computed here independently.
        rm = RoutingMatrix.certify(np.array([[0.0, 0.5], [0.0, 0.0]]))
        u = np.stack([-T_NODES, T_NODES])
        ref = oblique_reflection(u, rm)
        np.testing.assert_allclose(ref.y[0], T_NODES, atol=1e-12)
        np.testing.assert_allclose(ref.z[0], 0.0, atol=1e-12)
        z2_hand, y2_hand = skorokhod_1d(u[1] - 0.5 * T_NODES)
        np.testing.assert_allclose(ref.z[1], z2_hand, atol=1e-12)
        np.testing.assert_allclose(ref.y[1], y2_hand, atol=1e-12)
        np.testing.assert_allclose(ref.z[1], 0.5 * T_NODES, atol=1e-12)

    def test_solution_properties_random(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            K = int(rng.integers(1, 5))
            rm = random_routing(rng, K)
            u = random_paths(rng, K, 80)
            ref = oblique_reflection(u, rm)
            scale = max(np.abs(u).max(), 1.0)
            np.testing.assert_allclose(ref.z, u + rm.R @ ref.y, atol=1e-8 * scale)
            assert ref.z.min() >= 0.0
            assert np.diff(ref.y, axis=1).min(initial=0.0) >= 0.0
            assert np.all(ref.y[:, 0] >= 0.0)
            assert ref.residual <= 1e-8 * scale

    def test_positive_homogeneity_dyadic_exact(self):
        rng = np.random.default_rng(3)
        rm = random_routing(rng, 3)
        u = random_paths(rng, 3, 60)
        base = oblique_reflection(u, rm)
        for c in (0.5, 2.0, 8.0):
            scaled = oblique_reflection(c * u, rm)
            assert np.array_equal(scaled.z, c * base.z)
            assert np.array_equal(scaled.y, c * base.y)

    def test_positive_homogeneity_generic(self):
        rng = np.random.default_rng(4)
        rm = random_routing(rng, 2)
        u = random_paths(rng, 2, 60)
        base = oblique_reflection(u, rm)
        c = 3.7
        scaled = oblique_reflection(c * u, rm)
        np.testing.assert_allclose(scaled.z, c * base.z, atol=1e-9 * c)
        np.testing.assert_allclose(scaled.y, c * base.y, atol=1e-9 * c)

    def test_negative_start_rejected(self):
        rm = RoutingMatrix.certify(np.zeros((2, 2)))
        u = np.zeros((2, 10))
        u[1, 0] = -0.1
        with pytest.raises(PreconditionError):
            oblique_reflection(u, rm)

    def test_iteration_budget_exhaustion_reports_residual(self):
        rm = RoutingMatrix.certify(np.array([[0.0, 0.9], [0.9, 0.0]]))
        rng = np.random.default_rng(5)
        u = random_paths(rng, 2, 50)
        with pytest.raises(NonConvergenceError) as err:
            oblique_reflection(u, rm, max_iter=2)
        assert err.value.residual > 0.0


class TestLipschitz:
    def test_identical_inputs_rejected(self):
        rm = RoutingMatrix.certify(np.zeros((2, 2)))
        u = np.ones((2, 10))
        with pytest.raises(PreconditionError):
            lipschitz_ratio(u, u, rm)

    def test_constant_shift_within_bound(self):
        rng = np.random.default_rng(6)
        rm = random_routing(rng, 3)
        u1 = random_paths(rng, 3, 80)
        res = lipschitz_ratio(u1, u1 + 0.3, rm)
        assert res["ratio"] <= res["bound"] + 1e-12

    def test_random_pairs_within_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            K = int(rng.integers(1, 5))
            rm = random_routing(rng, K)
            u1 = random_paths(rng, K, 60)
            u2 = random_paths(rng, K, 60)
            res = lipschitz_ratio(u1, u2, rm)
            assert res["ratio"] <= res["bound"] + 1e-9


class TestMonotonicity:
    def test_equal_inputs_pass(self):
        rng = np.random.default_rng(8)
        rm = random_routing(rng, 2)
        u = random_paths(rng, 2, 50)
        assert check_monotonicity(u, u, rm).passed

    def test_linear_increase_passes(self):
        rng = np.random.default_rng(9)
        rm = random_routing(rng, 2)
        u = random_paths(rng, 2, 50)
        t = np.linspace(0, 1, 51)
        assert check_monotonicity(u, u + t[None, :], rm).passed

    def test_random_nondecreasing_increments(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            K = int(rng.integers(1, 4))
            rm = random_routing(rng, K)
            u = random_paths(rng, K, 50)
            bump = np.cumsum(rng.uniform(0.0, 0.05, (K, 51)), axis=1)
            res = check_monotonicity(u, u + bump, rm)
            assert res.passed, f"violation {res.worst}"

    def test_bad_precondition_rejected(self):
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        u = np.zeros((1, 10))
        with pytest.raises(PreconditionError):
            check_monotonicity(u, u - 1.0, rm)


class TestNonanticipation:
    def test_identical_everywhere(self):
        rng = np.random.default_rng(11)
        rm = random_routing(rng, 2)
        u = random_paths(rng, 2, 50)
        assert check_nonanticipation(u, u, rm, agree_upto=50).passed

    def test_divergence_after_halfway(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            K = int(rng.integers(1, 4))
            rm = random_routing(rng, K)
            u1 = random_paths(rng, K, 80)
            u2 = u1.copy()
            u2[:, 41:] += np.cumsum(rng.uniform(0, 0.3, (K, 40)), axis=1)
            res = check_nonanticipation(u1, u2, rm, agree_upto=40)
            assert res.passed, f"prefix gap {res.worst}"

    def test_empty_window_vacuous(self):
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        u1, u2 = np.zeros((1, 10)), np.ones((1, 10))
        assert check_nonanticipation(u1, u2, rm, agree_upto=-1).passed

    def test_violation_of_precondition(self):
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        u1, u2 = np.zeros((1, 10)), np.ones((1, 10))
        with pytest.raises(PreconditionError):
            check_nonanticipation(u1, u2, rm, agree_upto=3)


def uniform_lead_arrivals(grid: Grid, rate: float, lead_lo: float, lead_hi: float) -> MeasurePath:
    """Arrivals at constant `rate` whose deadline is arrival time plus a
    Uniform[lead_lo, lead_hi] lead; cumulative field computed in closed form
    as rate * (G(x) - G(x - t)) with G the antiderivative of the lead CDF."""
    path = MeasurePath.zeros(grid, 1)
    ts = grid.t_nodes()[:, None]
    xs = grid.x_nodes()[None, :]
    width = lead_hi - lead_lo

    def G(y):
        y_mid = np.clip(y, lead_lo, lead_hi)
        return (y_mid - lead_lo) ** 2 / (2 * width) + np.maximum(y - lead_hi, 0.0)

    path.values[0] = rate * (G(xs) - G(xs - ts))
    return path


class TestSoftFluid:
    def grid(self) -> Grid:
        return Grid(t_max=1.0, x_max=2.0, n_t=100, n_x=100)

    def test_empty_system(self):
        grid = self.grid()
        rm = RoutingMatrix.certify(np.array([[0.0, 0.5], [0.2, 0.0]]))
        arrivals = MeasurePath.zeros(grid, 2)
        mu = np.vstack([grid.t_nodes(), 2.0 * grid.t_nodes()])
        sol = solve_soft_fluid(arrivals, mu, rm)
        assert np.all(sol.queue.values == 0.0)
        assert sol.departures.values.max() <= 1e-8
        np.testing.assert_allclose(sol.idleness, mu, atol=1e-8)

    def test_subcritical_single_node_never_queues(self):
        grid = self.grid()
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        arrivals = uniform_lead_arrivals(grid, rate=0.6, lead_lo=0.2, lead_hi=0.8)
        mu = grid.t_nodes()[None, :]  # capacity rate 1 > 0.6
        sol = solve_soft_fluid(arrivals, mu, rm)
        assert sol.queue.values.max() <= 1e-12
        np.testing.assert_allclose(
            sol.idleness[0], grid.t_nodes() - 0.6 * grid.t_nodes(), atol=1e-12)

    def test_supercritical_single_node_total_mass(self):
        grid = self.grid()
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        lam, m = 1.5, 1.0
        arrivals = uniform_lead_arrivals(grid, rate=lam, lead_lo=0.2, lead_hi=0.8)
        mu = m * grid.t_nodes()[None, :]
        sol = solve_soft_fluid(arrivals, mu, rm)
        total = sol.queue.values[0, :, grid.n_x]
        np.testing.assert_allclose(total, (lam - m) * grid.t_nodes(), atol=1e-10)

    def test_vmvsp_conditions_on_feedback_network(self):
        grid = Grid(t_max=1.0, x_max=2.0, n_t=120, n_x=80)
        rm = RoutingMatrix.certify(np.array([[0.0, 0.6], [0.3, 0.0]]))
        a1 = uniform_lead_arrivals(grid, rate=1.4, lead_lo=0.3, lead_hi=0.9)
        a2 = uniform_lead_arrivals(grid, rate=0.7, lead_lo=0.1, lead_hi=0.6)
        arrivals = MeasurePath.zeros(grid, 2)
        arrivals.values[0] = a1.values[0]
        arrivals.values[1] = a2.values[0]
        mu = np.vstack([1.0 * grid.t_nodes(), 0.8 * grid.t_nodes()])
        sol = solve_soft_fluid(arrivals, mu, rm)

        mass = sol.diagnostics["total_input_mass"]
        assert sol.diagnostics["residual_balance"] <= 1e-6 * max(mass, 1.0)
        assert sol.diagnostics["residual_capacity_split"] <= 1e-10 * max(mass, 1.0)
        tol_comp = sol.diagnostics["complementarity_tolerance"]
        assert sol.diagnostics["complementarity_departures"] <= tol_comp
        assert sol.diagnostics["complementarity_idleness"] <= tol_comp
        # level monotonicity both ways, zero violations after the solve
        assert np.diff(sol.queue.values, axis=2).min() >= 0.0
        assert np.diff(sol.departures_above, axis=2).max() <= 0.0
        sol.queue.validate()
        sol.departures.validate(increasing=True)

    def test_capacity_must_start_at_zero(self):
        grid = self.grid()
        rm = RoutingMatrix.certify(np.zeros((1, 1)))
        arrivals = MeasurePath.zeros(grid, 1)
        mu = grid.t_nodes()[None, :] + 1.0
        with pytest.raises(PreconditionError):
            solve_soft_fluid(arrivals, mu, rm)
