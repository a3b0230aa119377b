import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from exploratory_switching import families
from exploratory_switching.acceptance import symmetric_model
from exploratory_switching.errors import ModelValidationError, NonFiniteValueError, SubIterationError
from exploratory_switching.grid import SpaceTimeGrid, ValueField
from exploratory_switching.model import SwitchingModel, value_bound
from exploratory_switching.pde import (
    SolverOptions,
    box_doubling_check,
    check_a_priori_bound,
    residual_norm,
    solve_exploratory_hjb,
    solve_fixed_policy,
    terminal_residual,
)
from exploratory_switching.policy import GeneratorPolicy

SYM = 0.2 * math.exp(-2.5)


def flat_model(f=(0.0, 0.0), h=0.0, g=0.5, lam=0.2, drift=(-2.0, 2.0), sigma=0.5, dim=1):
    """x-independent rewards, so the value solves an ODE system in t."""
    m = len(f)
    costs = np.full((m, m), g)
    np.fill_diagonal(costs, 0.0)
    return SwitchingModel(
        m=m,
        state_dim=dim,
        drift=lambda t, x, i: np.full(np.shape(x), drift[i % len(drift)]),
        vol=lambda t, x, i: sigma * np.broadcast_to(np.eye(dim), np.shape(x) + (dim,)).copy(),
        running_reward=lambda t, x, i: np.full(np.shape(x)[:-1], f[i]),
        terminal_reward=lambda x: np.full(np.shape(x)[:-1], h),
        switch_cost=costs,
        temperature=lam,
        horizon=1.0,
        reward_bound=max(abs(v) for v in f) + abs(h),
        noise_dim=dim,
    )


def ode_reference(model, t):
    """V(t) of the x-independent exploratory system by a tight ODE solve backwards from T."""
    lam, g = model.temperature, model.switch_cost
    f = np.array([model.running_reward(0.0, np.zeros((1, 1)), i)[0] for i in range(model.m)])

    def rhs(s, v):  # s = T - t
        z = (v[None, :] - g - v[:, None]) / lam
        np.fill_diagonal(z, -np.inf)
        return f + lam * np.exp(z).sum(axis=1)

    sol = solve_ivp(rhs, (0.0, model.horizon), np.zeros(model.m), rtol=1e-12, atol=1e-13, dense_output=True)
    return sol.sol(model.horizon - np.asarray(t)).T


class TestSymmetricCase:
    def test_closed_form_coarse(self, symmetric):
        grid = SpaceTimeGrid(1.0, 200, (-3.0,), (3.0,), (121,))
        V = solve_exploratory_hjb(symmetric, grid)
        exact = SYM * (1 - grid.t_nodes)
        assert np.max(np.abs(V.values - exact[None, :, None])) < 1e-6
        assert V.values[0, 0, 60] == pytest.approx(0.016417, abs=1e-6)

    def test_fixed_optimal_policy_with_constant_terminal(self):
        model = flat_model(h=0.7)
        grid = SpaceTimeGrid(1.0, 100, (-3.0,), (3.0,), (61,))
        pol = GeneratorPolicy.constant([[0, math.exp(-2.5)], [math.exp(-2.5), 0]])
        V = solve_fixed_policy(model, pol, grid)
        exact = 0.7 + SYM * (1 - grid.t_nodes)
        np.testing.assert_allclose(V.values, np.broadcast_to(exact[None, :, None], V.values.shape), atol=1e-10)

    def test_three_regimes_in_two_dimensions(self):
        model = flat_model(f=(0.0, 0.0, 0.0), drift=(0.3, -0.3, 0.0), dim=2)
        grid = SpaceTimeGrid(1.0, 20, (-1.0, -1.0), (1.0, 1.0), (21, 21))
        V = solve_exploratory_hjb(model, grid)
        exact = 2 * SYM * (1 - grid.t_nodes)
        assert np.max(np.abs(V.values - exact[None, :, None, None])) < 1e-9


class TestHarmonic:
    def test_driftless_identity_terminal(self):
        model = SwitchingModel(
            m=2,
            state_dim=1,
            drift=lambda t, x, i: np.zeros(np.shape(x)),
            vol=lambda t, x, i: np.full(np.shape(x) + (1,), 0.4),
            running_reward=lambda t, x, i: np.zeros(np.shape(x)[:-1]),
            terminal_reward=lambda x: x[..., 0],
            switch_cost=[[0, 0.5], [0.5, 0]],
            temperature=0.2,
            horizon=1.0,
            reward_bound=4.0,
        )
        grid = SpaceTimeGrid(1.0, 100, (-4.0,), (4.0,), (161,))
        V = solve_fixed_policy(model, GeneratorPolicy.zero(2), grid)
        x = grid.axes[0]
        inner = np.abs(x) <= 1.5
        err = np.abs(V.values[:, 0] - x[None, :])[:, inner]
        assert err.max() < 1e-6


class TestRegulator:
    def test_terminal_exact(self, regulator, small_field):
        assert terminal_residual(small_field, regulator) == 0.0

    def test_a_priori_bound(self, regulator, small_field):
        bound = value_bound(regulator, small_field.grid.t_nodes)
        assert np.all(np.abs(small_field.values) <= bound[None, :, None] + 1e-6)
        assert check_a_priori_bound(small_field, regulator) < 0

    def test_residual_of_solution(self, regulator, small_field):
        assert residual_norm(small_field, regulator) < 1e-8

    def test_residual_of_perturbed_field(self, regulator, small_field):
        bumped = ValueField(small_field.values + 0.1, small_field.grid)
        assert residual_norm(bumped, regulator) > 1e-3

    def test_terminal_only_field(self, regulator, small_field):
        vals = np.zeros_like(small_field.values)
        vals[:, -1] = small_field.values[:, -1]
        assert terminal_residual(ValueField(vals, small_field.grid), regulator) == 0.0

    def test_fixed_point_of_improvement(self, regulator, small_field):
        pol = GeneratorPolicy.from_field(small_field, regulator)
        again = solve_fixed_policy(regulator, pol, small_field.grid)
        assert small_field.sup_distance(again) < 1e-6

    def test_symmetry(self, small_field):
        # mu_0 = -mu_1 and even rewards: V_0(t, x) = V_1(t, -x)
        np.testing.assert_allclose(small_field.values[0], small_field.values[1][:, ::-1], atol=1e-10)

    def test_monotone_in_temperature_reported(self, regulator, small_grid, small_field, record_property):
        cold = solve_exploratory_hjb(regulator.with_temperature(0.1), small_grid)
        worst = float(np.min(small_field.values - cold.values))
        record_property("min V(0.2) - V(0.1)", worst)
        assert np.isfinite(worst)

    def test_comparison(self, regulator, small_grid, small_field):
        lower = SwitchingModel(
            **{n: getattr(regulator, n) for n in regulator.__dataclass_fields__ if n != "running_reward"},
            running_reward=lambda t, x, i: regulator.running_reward(t, x, i) - 0.3 * np.exp(-x[..., 0] ** 2),
        )
        V_low = solve_exploratory_hjb(lower, small_grid)
        assert np.all(V_low.values <= small_field.values + 1e-8)

    def test_box_doubling_with_neumann(self, regulator, small_grid):
        assert box_doubling_check(regulator, small_grid) < 1e-4

    def test_bound_boundary_is_reproducible_but_leaks(self, regulator, small_grid):
        # the verbatim truncation value K(T - t) + h sits far above the solution
        opts = SolverOptions(boundary="bound", check_bound=False)
        assert box_doubling_check(regulator, small_grid, opts) > 1e-4


class TestRefinement:
    def test_halving_reduces_error(self):
        model = flat_model(f=(0.0, 1.0))
        errors = []
        for nodes, steps in ((31, 25), (61, 50), (121, 100)):
            grid = SpaceTimeGrid(1.0, steps, (-3.0,), (3.0,), (nodes,))
            V = solve_exploratory_hjb(model, grid)
            ref = ode_reference(model, grid.t_nodes)  # (K+1, m)
            errors.append(float(np.max(np.abs(V.values[:, :, nodes // 2] - ref.T))))
        assert errors[0] / errors[1] >= 1.8
        assert errors[1] / errors[2] >= 1.8


class TestTwoDimensional:
    def test_put_options_small_grid(self):
        model = families.put_options()
        grid = SpaceTimeGrid(1.0, 20, (0.0, 0.0), (3.0, 3.0), (31, 31))
        V = solve_exploratory_hjb(model, grid)
        assert terminal_residual(V, model) == 0.0
        mid = V.values[:, 10]
        # puts lose value as the underlying rises
        assert np.all(np.diff(mid[0, 5:16, 10], axis=0) <= 1e-9)
        assert np.all(np.diff(mid[1, 10, 5:16]) <= 1e-9)


class TestErrors:
    def test_sub_iteration_cap(self, regulator, small_grid):
        with pytest.raises(SubIterationError) as err:
            solve_exploratory_hjb(regulator.with_temperature(0.02), small_grid,
                                  SolverOptions(max_sub_iterations=1, tol=1e-14))
        assert err.value.time_index >= 0

    def test_nan_reward_aborts(self, small_grid):
        model = flat_model()
        bad = SwitchingModel(**{n: getattr(model, n) for n in model.__dataclass_fields__ if n != "running_reward"},
                             running_reward=lambda t, x, i: np.full(np.shape(x)[:-1], np.nan))
        with pytest.raises(NonFiniteValueError):
            solve_exploratory_hjb(bad, small_grid)

    def test_bad_boundary_name(self):
        with pytest.raises(ModelValidationError):
            SolverOptions(boundary="dirichlet")

    def test_three_dimensions_rejected(self):
        with pytest.raises(ModelValidationError):
            SpaceTimeGrid(1.0, 10, (0, 0, 0), (1, 1, 1), (5, 5, 5))


class TestSerialization:
    @pytest.mark.parametrize("encoding", ["binary", "csv"])
    def test_round_trip(self, tmp_path, small_field, encoding):
        head = small_field.save(tmp_path / "v", model_hash="abc", encoding=encoding)
        loaded, header = ValueField.load(head)
        assert header["model_hash"] == "abc"
        assert loaded.grid == small_field.grid
        np.testing.assert_array_equal(loaded.values, small_field.values)

    def test_interpolation_at_nodes(self, small_field):
        grid = small_field.grid
        k = 37
        vals = small_field.interpolate(grid.t_nodes[k], grid.points)
        np.testing.assert_allclose(vals.T, small_field.values[:, k], atol=1e-12)
