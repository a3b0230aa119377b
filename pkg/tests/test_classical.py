import numpy as np
import pytest

from exploratory_switching.acceptance import regulator_grid, symmetric_model
from exploratory_switching.classical import (
    INTERIOR_LAYERS,
    lambda_sweep,
    obstacle_slack,
    project,
    solve_variational_inequality,
    write_sweep_csv,
)
from exploratory_switching.errors import ModelValidationError, ProjectionError
from exploratory_switching.pde import node_residuals, solve_exploratory_hjb
from exploratory_switching.policy import GeneratorPolicy


@pytest.fixture(scope="module")
def vi_small(regulator, small_grid):
    return solve_variational_inequality(regulator, small_grid)


class TestProjection:
    def test_lifts_to_obstacle(self):
        V = np.array([[0.0, 1.0], [2.0, 0.0]])
        out, moved = project(V, np.array([[0, 0.5], [0.5, 0]]))
        np.testing.assert_allclose(out, [[1.5, 1.0], [2.0, 0.5]])
        assert moved.tolist() == [[True, False], [False, True]]

    def test_three_regimes(self):
        g = np.array([[0, 0.1, 0.15], [0.1, 0, 0.1], [0.15, 0.1, 0]])
        out, _ = project(np.array([[0.0], [0.0], [5.0]]), g)
        np.testing.assert_allclose(out[:, 0], [4.85, 4.9, 5.0])

    def test_sweep_budget(self):
        # one sweep moves entries and leaves no sweep to confirm stability
        with pytest.raises(ProjectionError):
            project(np.array([[0.0], [5.0]]), np.array([[0, 0.5], [0.5, 0]]), max_sweeps=1)


class TestVariationalInequality:
    def test_zero_rewards(self, small_grid):
        field = solve_variational_inequality(symmetric_model(), small_grid)
        assert np.all(field.values == 0.0)
        assert field.meta["projected_nodes"] == 0

    def test_single_regime_rejected(self):
        with pytest.raises(ModelValidationError):
            symmetric_model(m=1)

    def test_obstacle_consistency(self, regulator, vi_small):
        assert obstacle_slack(vi_small, regulator.switch_cost).min() >= -1e-9

    def test_complementarity(self, regulator, vi_small, small_grid):
        slack = obstacle_slack(vi_small, regulator.switch_cost)
        free = GeneratorPolicy.zero(2)
        threshold = 10 * small_grid.dx[0]
        worst = 0.0
        for k in range(0, small_grid.n_steps, 7):
            r = node_residuals(vi_small, regulator, k, free)
            inactive = slack[:, k] > threshold
            inactive[:, [0, -1]] = False
            if inactive.any():
                worst = max(worst, float(np.abs(r[inactive]).max()))
        assert worst < 1e-6

    @pytest.mark.xfail(strict=True, reason="interior gap is 0.089 at lambda = 0.01; decays like lambda log(1/lambda)")
    def test_band_around_small_temperature(self, regulator):
        grid = regulator_grid()
        vi = solve_variational_inequality(regulator, grid)
        cold = solve_exploratory_hjb(regulator.with_temperature(0.01), grid)
        assert cold.sup_distance(vi, INTERIOR_LAYERS) <= 0.05


class TestSweep:
    def test_distances_decrease(self, regulator, small_grid, vi_small):
        rows = lambda_sweep(regulator, small_grid, [0.2, 0.1, 0.05, 0.01], reference=vi_small)
        d = [r.sup_distance for r in rows]
        assert all(b < a for a, b in zip(d, d[1:]))

    def test_single_temperature(self, regulator, small_grid, vi_small):
        rows = lambda_sweep(regulator, small_grid, [0.2], reference=vi_small)
        assert len(rows) == 1 and rows[0].temperature == 0.2

    @pytest.mark.parametrize("lambdas", [[0.1, 0.2], [0.2, 0.2], [0.2, -0.1], []])
    def test_bad_temperatures(self, regulator, small_grid, vi_small, lambdas):
        with pytest.raises(ModelValidationError):
            lambda_sweep(regulator, small_grid, lambdas, reference=vi_small)

    def test_heavier_costs_reported(self, regulator, small_grid, vi_small, record_property):
        heavy = regulator.with_costs(10 * regulator.switch_cost)
        base = lambda_sweep(regulator, small_grid, [0.2], reference=vi_small)[0].sup_distance
        scaled = lambda_sweep(heavy, small_grid, [0.2])[0].sup_distance
        record_property("distance x1 / x10 costs", (base, scaled))
        assert np.isfinite(scaled)

    def test_csv(self, tmp_path, regulator, small_grid, vi_small):
        rows = lambda_sweep(regulator, small_grid, [0.2, 0.1], reference=vi_small)
        text = write_sweep_csv(rows, tmp_path / "sweep.csv").read_text().splitlines()
        assert text[0] == "lambda,sup_distance"
        assert float(text[1].split(",")[0]) == 0.2
