"""Rate functionals: local occupation cost, tilts, quadrature, joint rate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import (
    dv_closed_form_2,
    dv_grid_search_3,
    dv_tilt_closed_form_2,
    random_generator,
    random_interior_simplex,
)
from mmldp import (
    KernelPath,
    NonpositiveTiltError,
    PathGrid,
    RegimeModel,
    dv_gradient,
    dv_local,
    dv_objective,
    invariant_distribution,
    invariant_kernel,
    joint_rate,
    mixed_coefficients,
    mollify,
    occupation_rate,
    path_rate,
    tilted_generator,
    validate_generator,
)
from mmldp.errors import GridMismatchError

Q2 = validate_generator([[-1.0, 1.0], [1.0, -1.0]])


class TestRegimeModel:
    def test_affine_evaluation(self):
        model = RegimeModel([1.0, -1.0], [0.5, 0.0], [1.0, 2.0], [0.0, 0.1])
        assert model.drift(0, 2.0) == 2.0
        assert model.sigma(1, 1.0) == 2.1
        assert model.drift_states(0.0).tolist() == [1.0, -1.0]

    def test_needs_some_diffusion(self):
        with pytest.raises(ValueError):
            RegimeModel([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0])


class TestDvLocal:
    def test_invariant_gives_zero(self):
        sol = dv_local(Q2, [0.5, 0.5])
        assert sol.value <= 1e-10
        assert sol.tilt == pytest.approx([1.0, 1.0], abs=1e-10)

    def test_two_state_example(self):
        sol = dv_local(Q2, [0.9, 0.1])
        assert sol.value == pytest.approx(0.4, abs=1e-10)
        assert sol.tilt[1] == pytest.approx(1.0 / 3.0, abs=1e-8)

    def test_asymmetric_zero_at_invariant(self):
        g = validate_generator([[-2, 2], [3, -3]])
        sol = dv_local(g, [0.6, 0.4])
        assert sol.value <= 1e-12  # (sqrt(2*0.6) - sqrt(3*0.4))^2 = 0

    def test_closed_form_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            q12, q21 = rng.uniform(0.3, 3.0, size=2)
            g = validate_generator([[-q12, q12], [q21, -q21]])
            for p in np.linspace(0.05, 0.95, 19):
                sol = dv_local(g, [p, 1 - p])
                assert sol.value == pytest.approx(dv_closed_form_2(q12, q21, p), abs=1e-8)
                assert sol.tilt[1] == pytest.approx(dv_tilt_closed_form_2(q12, q21, p),
                                                    rel=1e-6)

    def test_boundary_point_clamped(self):
        # limit value at the vertex is -Q_11; the interior clamp perturbs it
        # by O(sqrt(theta))
        sol = dv_local(Q2, [1.0, 0.0])
        assert sol.value == pytest.approx(1.0, abs=1e-4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            d = int(rng.integers(2, 6))
            g = validate_generator(random_generator(rng, d))
            rho = random_interior_simplex(rng, d)
            z = rng.normal(scale=0.7, size=d - 1)
            grad = dv_gradient(g, rho, z)
            h = 1e-6
            for k in range(d - 1):
                zp, zm = z.copy(), z.copy()
                zp[k] += h
                zm[k] -= h
                fd = (dv_objective(g, rho, zp) - dv_objective(g, rho, zm)) / (2 * h)
                assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_three_state_grid_search(self):
        rng = np.random.default_rng(3)
        for _ in range(3):
            rates = random_generator(rng, 3)
            g = validate_generator(rates)
            rho = random_interior_simplex(rng, 3)
            sol = dv_local(g, rho)
            ref, _ = dv_grid_search_3(rates, rho)
            assert sol.value == pytest.approx(ref, abs=1e-5)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_bounds_and_convexity(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 6))
        g = validate_generator(random_generator(rng, d))
        bound = g.trace_bound()
        r1 = random_interior_simplex(rng, d)
        r2 = random_interior_simplex(rng, d)
        lam = rng.uniform(0.05, 0.95)
        v1 = dv_local(g, r1).value
        v2 = dv_local(g, r2).value
        vm = dv_local(g, lam * r1 + (1 - lam) * r2).value
        assert 0.0 <= v1 <= bound
        assert vm <= lam * v1 + (1 - lam) * v2 + 1e-8

    def test_positive_away_from_invariant(self):
        rng = np.random.default_rng(4)
        hits = 0
        for _ in range(100):
            d = int(rng.integers(2, 5))
            g = validate_generator(random_generator(rng, d))
            pi = invariant_distribution(g)
            rho = random_interior_simplex(rng, d)
            if np.abs(rho - pi).max() > 0.05:
                hits += 1
                assert dv_local(g, rho).value >= 1e-6
        assert hits > 50  # the sample actually exercises the claim


class TestTiltedGenerator:
    def test_unit_tilt_identity(self):
        out = tilted_generator(Q2, np.array([1.0, 1.0]))
        assert np.array_equal(out.rates, Q2.rates)

    def test_hand_example(self):
        out = tilted_generator(Q2, np.array([1.0, 2.0]))
        assert out.rates == pytest.approx(np.array([[-2.0, 2.0], [0.5, -0.5]]))

    def test_rows_sum_zero(self):
        # diagonal is built as minus the off-diagonal sum; the residual after
        # re-summation is at most a couple of ulps of the row magnitude
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = int(rng.integers(2, 6))
            g = validate_generator(random_generator(rng, d))
            u = rng.uniform(0.2, 3.0, size=d)
            out = tilted_generator(g, u)
            scale = np.abs(out.rates).max()
            assert np.abs(out.rates.sum(axis=1)).max() <= 4e-16 * scale

    def test_matrix_identity(self):
        # entrywise construction agrees with
        # diag(u)^-1 Q diag(u) - diag(u)^-1 diag(Qu)
        rng = np.random.default_rng(14)
        for _ in range(10):
            d = int(rng.integers(2, 6))
            g = validate_generator(random_generator(rng, d))
            u = rng.uniform(0.2, 3.0, size=d)
            D = np.diag(u)
            Dinv = np.diag(1.0 / u)
            ref = Dinv @ g.rates @ D - Dinv @ np.diag(g.rates @ u)
            out = tilted_generator(g, u)
            assert np.abs(out.rates - ref).max() <= 1e-12 * np.abs(ref).max()

    def test_nonpositive_tilt(self):
        with pytest.raises(NonpositiveTiltError):
            tilted_generator(Q2, np.array([1.0, -1.0]))


class TestInvariantOfTilt:
    def test_invariant_point(self):
        from mmldp import invariant_of_tilt
        assert invariant_of_tilt(Q2, [0.5, 0.5]) <= 1e-8

    def test_two_state_tilt(self):
        from mmldp import invariant_of_tilt
        assert invariant_of_tilt(Q2, [0.9, 0.1]) <= 1e-8

    def test_random_generators(self):
        from mmldp import invariant_of_tilt
        rng = np.random.default_rng(6)
        for _ in range(30):
            d = int(rng.integers(2, 7))
            g = validate_generator(random_generator(rng, d))
            rho = random_interior_simplex(rng, d)
            assert invariant_of_tilt(g, rho) <= 1e-8


class TestOccupationRate:
    def test_invariant_kernel_is_zero(self):
        nu = invariant_kernel(Q2, 1.0, 100)
        assert occupation_rate(Q2, nu) <= 1e-12

    def test_constant_kernel_closed_form(self):
        nu = KernelPath.constant([0.9, 0.1], 1.0, 50)
        assert occupation_rate(Q2, nu) == pytest.approx(0.4, abs=1e-9)

    def test_vertex_kernel_limit_value(self):
        nu = KernelPath.constant([1.0, 0.0], 1.0, 20)
        val = occupation_rate(Q2, nu)
        assert val == pytest.approx(1.0, abs=1e-4)
        assert val <= Q2.trace_bound()

    def test_bounds_on_random_kernels(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            d = int(rng.integers(2, 5))
            g = validate_generator(random_generator(rng, d))
            rows = rng.dirichlet(np.ones(d), size=40)
            nu = KernelPath(np.linspace(0, 1, 41), rows)
            val = occupation_rate(g, nu)
            assert 0.0 <= val <= g.trace_bound()

    def test_continuity_along_mollification(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            rows = np.zeros((60, 2))
            cut = int(rng.integers(10, 50))
            rows[:cut, 0] = 1.0
            rows[cut:, 1] = 1.0
            nu = KernelPath(np.linspace(0, 1, 61), rows)
            base = occupation_rate(Q2, nu)
            errs = [abs(occupation_rate(Q2, mollify(nu, eta)) - base)
                    for eta in (0.2, 0.1, 0.05)]
            assert errs[0] >= errs[1] >= errs[2]

    def test_refinement_slope(self):
        g = validate_generator([[-1.5, 1.5], [0.7, -0.7]])

        def kernel(n):
            grid = np.linspace(0, 1, n + 1)
            mids = 0.5 * (grid[:-1] + grid[1:])
            p = 0.5 + 0.3 * np.sin(2.3 * mids + 0.4) - 0.1 * mids
            return KernelPath(grid, np.stack([p, 1 - p], axis=1))

        ns = [250, 500, 1000, 2000]
        vals = [occupation_rate(g, kernel(n)) for n in ns]
        diffs = [abs(a - b) for a, b in zip(vals, vals[1:])]
        slope = -np.polyfit(np.log(ns[:-1]), np.log(diffs), 1)[0]
        assert slope >= 0.9


class TestMixedCoefficients:
    def test_cancellation(self):
        model = RegimeModel([1.0, -1.0], [0, 0], [1, 1], [0, 0])
        b, s2 = mixed_coefficients(model, [0.5, 0.5], 0.0)
        assert b == 0.0

    def test_direct_sum(self):
        model = RegimeModel([0, 0], [0, 0], [1.0, 2.0], [0, 0])
        _, s2 = mixed_coefficients(model, [0.5, 0.5], 0.0)
        assert s2 == pytest.approx(2.5)

    def test_degenerate_mixture(self):
        model = RegimeModel([0.7, -1.0], [0.1, 0.2], [1.0, 2.0], [0.3, 0.0])
        b, s2 = mixed_coefficients(model, [1.0, 0.0], 1.5)
        assert b == pytest.approx(model.drift(0, 1.5))
        assert s2 == pytest.approx(model.sigma(0, 1.5) ** 2)


class TestPathRate:
    def test_cameron_martin_straight_line(self):
        model = RegimeModel([0, 0], [0, 0], [1, 1], [0, 0])
        phi = PathGrid.straight_line(1.0, 1.0, 1000)
        nu = invariant_kernel(Q2, 1.0, 1000)
        assert path_rate(model, phi, nu) == pytest.approx(0.5, abs=1e-6)

    def test_zero_cost_flow_has_zero_rate(self):
        from mmldp import zero_cost_path
        model = RegimeModel([0.8, 0.2], [-0.5, -0.5], [1, 1], [0, 0])
        phi = zero_cost_path(model, Q2, 1.0, 1000)
        nu = invariant_kernel(Q2, 1.0, 1000)
        assert path_rate(model, phi, nu) <= 1e-6

    def test_singular_cell_gives_infinity(self):
        # sigma(i, x) = x vanishes along phi == 0 while the drift does not
        model = RegimeModel([1.0, 1.0], [0, 0], [0, 0], [1.0, 1.0])
        phi = PathGrid(np.linspace(0, 1, 11), np.zeros(11))
        nu = invariant_kernel(Q2, 1.0, 10)
        assert path_rate(model, phi, nu) == np.inf

    def test_zero_over_zero_convention(self):
        # sigma == 0 on the path but the slope matches the drift: no cost
        model = RegimeModel([0.0, 0.0], [0, 0], [0, 0], [1.0, 1.0])
        phi = PathGrid(np.linspace(0, 1, 11), np.zeros(11))
        nu = invariant_kernel(Q2, 1.0, 10)
        assert path_rate(model, phi, nu) == 0.0

    def test_grid_mismatch(self):
        model = RegimeModel([0, 0], [0, 0], [1, 1], [0, 0])
        phi = PathGrid.straight_line(1.0, 1.0, 10)
        nu = invariant_kernel(Q2, 1.0, 20)
        with pytest.raises(GridMismatchError):
            path_rate(model, phi, nu)

    def test_refinement_slope(self):
        model = RegimeModel([0.5, -0.3], [0.2, -0.1], [1.0, 0.6], [0.1, 0.0])
        g = validate_generator([[-1.5, 1.5], [0.7, -0.7]])

        def inputs(n):
            grid = np.linspace(0, 1, n + 1)
            vals = np.sin(1.7 * grid) * 0.8 + 0.2 * grid
            vals[0] = 0.0
            mids = 0.5 * (grid[:-1] + grid[1:])
            p = 0.5 + 0.3 * np.sin(2.3 * mids + 0.4) - 0.1 * mids
            return PathGrid(grid, vals), KernelPath(grid, np.stack([p, 1 - p], axis=1))

        ns = [250, 500, 1000, 2000]
        vals = [path_rate(model, *inputs(n)) for n in ns]
        diffs = [abs(a - b) for a, b in zip(vals, vals[1:])]
        slope = -np.polyfit(np.log(ns[:-1]), np.log(diffs), 1)[0]
        assert slope >= 0.9


class TestJointRate:
    def test_zero_cost_pair(self):
        model = RegimeModel([0, 0], [0, 0], [1, 1], [0, 0])
        from mmldp import zero_cost_path
        phi = zero_cost_path(model, Q2, 1.0, 500)
        nu = invariant_kernel(Q2, 1.0, 500)
        breakdown = joint_rate(model, Q2, phi, nu)
        assert breakdown.joint <= 1e-6

    def test_decomposition_example(self):
        model = RegimeModel([0, 0], [0, 0], [1, 1], [0, 0])
        phi = PathGrid.straight_line(1.0, 1.0, 400)
        nu = KernelPath.constant([0.9, 0.1], 1.0, 400)
        breakdown = joint_rate(model, Q2, phi, nu)
        assert breakdown.path_rate == pytest.approx(0.5, abs=1e-9)
        assert breakdown.occupation_rate == pytest.approx(0.4, abs=1e-9)
        assert breakdown.joint == pytest.approx(0.9, abs=1e-9)

    def test_joint_is_exact_sum(self):
        model = RegimeModel([0.3, -0.2], [0.1, 0.0], [1.0, 1.5], [0, 0])
        rng = np.random.default_rng(9)
        rows = rng.dirichlet([1, 1], size=30)
        grid = np.linspace(0, 1, 31)
        vals = np.concatenate(([0.0], np.cumsum(rng.normal(size=30) * 0.05)))
        phi, nu = PathGrid(grid, vals), KernelPath(grid, rows)
        breakdown = joint_rate(model, Q2, phi, nu)
        assert breakdown.joint == breakdown.path_rate + breakdown.occupation_rate
