import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exploratory_switching import families
from exploratory_switching.errors import IntensityOverflowError, ModelValidationError
from exploratory_switching.model import (
    RegimeIntensityRow,
    SwitchingModel,
    bound_constant_K,
    ellipticity_constant,
    entropy_regularizer,
    hamiltonian,
    optimal_generator,
    optimal_intensity,
    row_entropy,
    value_bound,
    verify_reward_bound,
)

rates = st.floats(min_value=0.0, max_value=50.0, allow_nan=False)


def model_with(costs, lam=0.2, bound=1.0, horizon=1.0):
    m = len(costs)
    return SwitchingModel(
        m=m,
        state_dim=1,
        drift=lambda t, x, i: np.zeros(np.shape(x)),
        vol=lambda t, x, i: np.full(np.shape(x) + (1,), 0.5),
        running_reward=lambda t, x, i: np.zeros(np.shape(x)[:-1]),
        terminal_reward=lambda x: np.zeros(np.shape(x)[:-1]),
        switch_cost=costs,
        temperature=lam,
        horizon=horizon,
        reward_bound=bound,
    )


class TestValidation:
    def test_regulator_is_valid(self, regulator):
        assert regulator.m == 2
        assert regulator.switch_cost[0, 1] == 0.5

    @pytest.mark.parametrize(
        "costs",
        [
            [[0.1, 0.5], [0.5, 0.0]],  # nonzero diagonal
            [[0.0, 0.0], [0.5, 0.0]],  # zero off-diagonal
            [[0.0, -1.0], [0.5, 0.0]],
            [[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],  # 3 >= 1 + 1
            [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],  # equality is not strict
            [[0.0]],
        ],
    )
    def test_bad_costs_rejected(self, costs):
        with pytest.raises(ModelValidationError):
            model_with(costs)

    @pytest.mark.parametrize("field,value", [("temperature", 0.0), ("temperature", -1.0), ("horizon", 0.0)])
    def test_bad_scalars_rejected(self, field, value):
        kw = {"lam": 0.2, "horizon": 1.0}
        kw["lam" if field == "temperature" else "horizon"] = value
        with pytest.raises(ModelValidationError):
            model_with([[0, 0.5], [0.5, 0]], **kw)

    def test_costs_are_frozen(self, regulator):
        with pytest.raises(ValueError):
            regulator.switch_cost[0, 1] = 3.0

    def test_with_temperature_keeps_descriptor_in_sync(self, regulator):
        cold = regulator.with_temperature(0.05)
        assert cold.temperature == 0.05
        assert cold.descriptor["lambda"] == 0.05
        assert regulator.temperature == 0.2

    def test_ellipticity(self, regulator):
        pts = np.linspace(-3, 3, 11)[:, None]
        assert ellipticity_constant(regulator, pts) == pytest.approx(0.25)


class TestIntensityRow:
    def test_from_offdiagonal(self):
        row = RegimeIntensityRow.from_offdiagonal(1, [0.3, 99.0, 0.2])
        assert row.rates[1] == pytest.approx(-0.5)
        assert row.total == pytest.approx(0.5)

    @pytest.mark.parametrize("rates", [[-0.1, 0.1], [0.0, 0.5], [np.nan, 0.0]])
    def test_invalid_rows(self, rates):
        with pytest.raises(ModelValidationError):
            RegimeIntensityRow(1, rates)


class TestEntropy:
    def test_unit_rates(self):
        assert entropy_regularizer(RegimeIntensityRow.from_offdiagonal(0, [0, 1])) == 1.0

    def test_zero_rates(self):
        assert entropy_regularizer(RegimeIntensityRow.from_offdiagonal(0, [0, 0, 0])) == 0.0

    def test_rates_at_e(self):
        row = RegimeIntensityRow.from_offdiagonal(0, [0, math.e, math.e])
        assert entropy_regularizer(row) == pytest.approx(0.0, abs=1e-15)

    @given(st.lists(rates, min_size=2, max_size=2), st.lists(rates, min_size=2, max_size=2))
    def test_concave(self, a, b):
        a, b = np.array([0.0, *a]), np.array([0.0, *b])
        mid = row_entropy((a + b) / 2, 0)
        assert mid >= (row_entropy(a, 0) + row_entropy(b, 0)) / 2 - 1e-12

    def test_vectorised_matches_row(self, rng):
        r = rng.uniform(0, 3, size=(20, 3))
        src = rng.integers(0, 3, 20)
        for n in range(20):
            row = RegimeIntensityRow.from_offdiagonal(int(src[n]), r[n])
            assert row_entropy(r[n], src[n]) == pytest.approx(entropy_regularizer(row), abs=1e-14)


class TestOptimalIntensity:
    def test_balanced_values_give_unit_rates(self, regulator):
        row = optimal_intensity([0.0, 0.5], 0, regulator)
        assert row.rates[1] == pytest.approx(1.0)

    def test_direct_formula(self):
        # lambda = 1, V = (0, -1) and tiny cost: rate exp(-1 - g)
        model = model_with([[0, 1e-300], [1e-300, 0]], lam=1.0)
        row = optimal_intensity([0.0, -1.0], 0, model)
        assert row.rates[1] == pytest.approx(0.367879441, rel=1e-9)
        assert row.rates[0] == -row.rates[1]

    def test_regulator_pair(self, regulator):
        # lambda = 0.2, difference 0.5 equal to g: rate 1
        assert optimal_intensity([1.0, 1.5], 0, regulator).rates[1] == pytest.approx(1.0, abs=1e-15)

    def test_overflow_names_pair(self, regulator):
        with pytest.raises(IntensityOverflowError) as err:
            optimal_intensity([0.0, 200.0], 0, regulator)
        assert (err.value.source, err.value.target) == (0, 1)

    def test_rejects_bad_vector(self, regulator):
        with pytest.raises(ModelValidationError):
            optimal_intensity([0.0, np.nan], 0, regulator)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(-1e3, 1e3), st.integers(0, 2))
    def test_shift_invariance(self, v, c, i):
        model = families.put_options()
        a = optimal_intensity(np.array(v), i, model).rates
        b = optimal_intensity(np.array(v) + c, i, model).rates
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(0, 2))
    def test_hamiltonian_identity(self, v, i):
        model = families.put_options()
        row = optimal_intensity(v, i, model)
        z = (np.array(v) - model.switch_cost[i] - v[i]) / model.temperature
        expected = model.temperature * sum(math.exp(z[j]) for j in range(3) if j != i)
        assert hamiltonian(row, v, model) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_generator_rows_sum_to_zero(self, rng):
        gen = optimal_generator(0.1 * rng.normal(size=(50, 3)), np.array(families.PUT_COSTS), 0.1)
        np.testing.assert_allclose(gen.sum(axis=-1), 0.0, atol=1e-12)

    def test_regulator_field_rates(self, regulator, small_field):
        k, n = 40, 60
        v = small_field.values[:, k, n]
        gen = optimal_generator(v, regulator.switch_cost, regulator.temperature)
        expected = math.exp((v[1] - 0.5 - v[0]) / 0.2)
        assert abs(gen[0, 1] - expected) <= 1e-12 * max(1.0, expected)


class TestBounds:
    def test_regulator_constant(self, regulator):
        assert bound_constant_K(regulator) == pytest.approx(3.9 + 0.2 * math.exp(-2.5), abs=1e-12)
        assert bound_constant_K(regulator) == pytest.approx(3.916417, abs=1e-6)

    def test_regulator_reward_bound_by_scan(self, regulator):
        assert verify_reward_bound(regulator, -5, 5, nodes=20001) == pytest.approx(3.9, abs=1e-9)

    def test_large_temperature_asymptote(self):
        model = model_with([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]], lam=1e3, bound=1.0)
        target = 1.0 + 1e3 * 2
        assert abs(bound_constant_K(model) - target) / target < 0.01

    def test_huge_costs(self):
        model = model_with([[0, 1e4], [1e4, 0]], lam=0.2, bound=1.7)
        assert bound_constant_K(model) == pytest.approx(1.7, abs=1e-12)

    def test_value_bound(self, regulator):
        K = bound_constant_K(regulator)
        np.testing.assert_allclose(value_bound(regulator, [0.0, 1.0]), [K + 3.9, 3.9])
