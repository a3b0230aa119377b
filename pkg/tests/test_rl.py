import math

import numpy as np
import pytest

from exploratory_switching import families
from exploratory_switching.errors import (
    ArchitectureMismatchError,
    FormatVersionError,
    HashMismatchError,
    ModelValidationError,
    TrainingDivergedError,
)
from exploratory_switching.rl import (
    Architecture,
    MLPValue,
    TrainConfig,
    TrainingLog,
    built_in,
    delta_xi,
    gradient_check,
    load_checkpoint,
    orthogonality_solution,
    policy_from_params,
    save_checkpoint,
    train,
    uniform_start,
)
from exploratory_switching.rl.learner import Stepper, _rollout
from exploratory_switching.simulator import Environment, SimConfig

BUILT_INS = [("regulator", families.regulator), ("put-options", families.put_options), ("linear", families.linear_toy)]


def make(name, factory):
    model = factory()
    return model, built_in(name, model.m, model.state_dim, model.horizon, model.terminal_reward)


class FrozenField:
    """PDE solution plus a regime-blind linear correction; the correction's features play the test process."""

    n_params = 2

    def __init__(self, field):
        self.field = field

    def all_regimes(self, xi, t, x):
        return self.field.interpolate(t, x) + (1 - np.asarray(t))[..., None] * (xi[0] + xi[1] * x)

    def values(self, xi, t, x, i):
        return self.field.interpolate_regime(t, x, i) + (1 - np.asarray(t)) * (xi[0] + xi[1] * x[:, 0])


class TestNetwork:
    @pytest.mark.parametrize("name,factory", BUILT_INS)
    def test_terminal_constraint(self, name, factory, rng):
        model, ap = make(name, factory)
        xi = ap.init(rng) + rng.normal(size=ap.n_params)
        x = rng.uniform(0.5, 1.5, (7, model.state_dim))
        i = rng.integers(0, model.m, 7)
        np.testing.assert_array_equal(ap.values(xi, model.horizon, x, i), model.terminal_reward(x))
        assert np.all(ap.vjp(xi, model.horizon, x, i, np.ones(7)) == 0.0)

    def test_zero_weights_give_terminal(self, regulator, rng):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        x = rng.normal(size=(5, 1))
        np.testing.assert_array_equal(ap.values(np.zeros(ap.n_params), 0.3, x, [0, 1, 0, 1, 1]),
                                      regulator.terminal_reward(x))

    @pytest.mark.parametrize("name,factory", BUILT_INS)
    def test_gradient_check(self, name, factory, rng):
        model, ap = make(name, factory)
        xi = ap.init(rng) + (rng.normal(size=ap.n_params) if name == "linear" else 0.0)
        t = rng.uniform(0, 1, 4)
        x = rng.uniform(0.5, 1.5, (4, model.state_dim))
        i = rng.integers(0, model.m, 4)
        assert gradient_check(ap, xi, t, x, i, probes=100, step=1e-5, rng=rng) < 1e-5

    def test_gradient_check_heads(self, regulator, rng):
        ap = MLPValue(Architecture(2, (16, 16), ("relu", "tanh"), 2), 2, 1, 1.0, regulator.terminal_reward, heads=True)
        xi = ap.init(rng)
        assert gradient_check(ap, xi, rng.uniform(0, 1, 6), rng.normal(size=(6, 1)), rng.integers(0, 2, 6), rng=rng) < 1e-5

    def test_all_regimes_consistent(self, regulator, rng):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        xi = ap.init(rng)
        x = rng.normal(size=(9, 1))
        allv = ap.all_regimes(xi, 0.4, x)
        for i in (0, 1):
            np.testing.assert_allclose(allv[:, i], ap.values(xi, 0.4, x, np.full(9, i)), rtol=1e-14)

    def test_parameter_count(self):
        arch = Architecture(4, (128, 128), ("relu", "tanh"))
        assert arch.n_params == 4 * 128 + 128 + 128 * 128 + 128 + 128 + 1

    def test_wrong_length(self, regulator):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        with pytest.raises(ArchitectureMismatchError):
            ap.values(np.zeros(10), 0.0, np.zeros((1, 1)), [0])

    @pytest.mark.parametrize("bad", [dict(hidden=(8,), activations=("relu", "tanh")), dict(hidden=(8,), activations=("gelu",))])
    def test_bad_architecture(self, bad):
        with pytest.raises(ArchitectureMismatchError):
            Architecture(3, **bad)

    def test_unknown_builtin(self):
        with pytest.raises(ArchitectureMismatchError):
            built_in("resnet", 2, 1, 1.0, lambda x: 0)


class TestPolicyAndDelta:
    def test_symmetric_output(self, regulator):
        ap = built_in("linear", 2, 1, 1.0, regulator.terminal_reward)
        gen = policy_from_params(ap, np.array([0.3, -0.2]), 0.2, np.zeros((3, 1)), regulator)
        np.testing.assert_allclose(gen[:, 0, 1], math.exp(-2.5))
        np.testing.assert_allclose(gen.sum(axis=-1), 0.0, atol=1e-15)

    def test_unit_rate(self, regulator):
        class Fixed:
            def all_regimes(self, xi, t, x):
                return np.array([[0.0, 0.5]])
        assert policy_from_params(Fixed(), None, 0.0, np.zeros((1, 1)), regulator)[0, 0, 1] == pytest.approx(1.0)

    def test_delta_trivial(self):
        assert delta_xi(1.0, 1.0, 0.0, 3.0, 0.0, 0.01, 0.0) == 0.0
        assert delta_xi(0.0, 0.0, 0.0, 0.0, 0.5, 0.01, 0.2) == -0.5

    def test_orthogonality_at_pde_solution(self, regulator, regulator_field):
        sim = SimConfig.for_model(regulator, 100)
        env = Environment(regulator, sim.dt, uniform_start(-2.5, 2.5, 2))
        approx, xi, B, K = FrozenField(regulator_field), np.zeros(2), 20_000, 100

        class Stats:
            clamps = steps = 0

        X, I, V, F, R, C, A = _rollout(approx, xi, env, regulator, sim, B, np.random.default_rng(1), True, Stats())
        t = np.arange(K + 1) * sim.dt
        v_next = np.concatenate([V[1:], approx.values(xi, 1.0, X[K], I[K])[None]])
        D = delta_xi(V, v_next, F, R, C, sim.dt, regulator.temperature)
        tau = (1 - t[:K])[:, None]
        psi = np.stack([np.sum(tau * D, axis=0), np.sum(tau * X[:K, :, 0] * D, axis=0)], axis=-1)
        z = psi.mean(axis=0) / (psi.std(axis=0, ddof=1) / math.sqrt(B))
        assert np.all(np.abs(z) < 3)


class TestTraining:
    def test_zero_episodes(self, regulator, rng):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        xi0 = ap.init(rng)
        xi, log = train(regulator, SimConfig.for_model(regulator, 100), TrainConfig(episodes=0), ap, params=xi0)
        np.testing.assert_array_equal(xi, xi0)
        assert log.losses == []

    def test_deterministic(self, regulator):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        sim = SimConfig.for_model(regulator, 20)
        cfg = TrainConfig(episodes=3, batch=8, seed=5)
        start = uniform_start(-2, 2, 2, 20)
        a, la = train(regulator, sim, cfg, ap, start=start)
        b, lb = train(regulator, sim, cfg, ap, start=start)
        np.testing.assert_array_equal(a, b)
        assert la.losses == lb.losses

    def test_divergence_guard(self):
        toy = families.linear_toy()
        ap = built_in("linear", 2, 1, 1.0, toy.terminal_reward)
        cfg = TrainConfig(episodes=200, batch=1, rate=1e4, schedule="constant")
        with pytest.raises(TrainingDivergedError):
            train(toy, SimConfig.for_model(toy, 10), cfg, ap, start=uniform_start(-1, 1, 2))

    @pytest.mark.parametrize("mode", ["offline", "online"])
    def test_linear_toy_converges(self, mode):
        toy = families.linear_toy()
        ap = built_in("linear", 2, 1, 1.0, toy.terminal_reward)
        sim = SimConfig.for_model(toy, 20)
        start = uniform_start(-1, 1, 2)
        star = orthogonality_solution(toy, ap, sim, start, 200_000, 99)
        np.testing.assert_allclose(star, families.linear_toy_solution(toy), atol=0.01)
        cfg = TrainConfig(episodes=3000, batch=1, rate=0.05, schedule="constant", mode=mode, seed=3)
        xi, _ = train(toy, sim, cfg, ap, start=start)
        assert np.linalg.norm(xi - star) < 0.05

    def test_modes_differ(self):
        toy = families.linear_toy()
        ap = built_in("linear", 2, 1, 1.0, toy.terminal_reward)
        sim = SimConfig.for_model(toy, 20)
        runs = [train(toy, sim, TrainConfig(episodes=20, batch=1, rate=0.05, schedule="constant", mode=mode, seed=3),
                      ap, start=uniform_start(-1, 1, 2))[0] for mode in ("offline", "online")]
        assert not np.array_equal(*runs)

    def test_idle_steps_before_random_start(self, regulator):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        sim = SimConfig.for_model(regulator, 10)
        env = Environment(regulator, sim.dt, lambda b, rng: (np.zeros((b, 1)), np.zeros(b, int), np.full(b, 4)))

        class Stats:
            clamps = steps = 0

        stats = Stats()
        X, I, V, F, R, C, A = _rollout(ap, ap.init(np.random.default_rng(0)), env, regulator, sim, 3,
                                       np.random.default_rng(0), True, stats)
        assert np.all(X[:5] == 0.0)
        assert not A[:4].any() and A[4:].all()
        assert stats.steps == 3 * 6


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(schedule="sgd"), dict(mode="async"), dict(episodes=-1), dict(batch=0),
        dict(schedule="robbins-monro", nu=1.5), dict(schedule="robbins-monro", A=0.0),
        dict(schedule="robbins-monro", B=-1.0), dict(rate=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ModelValidationError):
            TrainConfig(**kw)

    def test_robbins_monro_rate(self):
        s = Stepper(TrainConfig(schedule="robbins-monro", A=5.0, B=20.0, nu=1.0), 1)
        assert s.rate(1) == pytest.approx(5 / 21)
        assert s.rate(100) == pytest.approx(5 / 120)

    def test_adam_is_ascent(self):
        s = Stepper(TrainConfig(schedule="adam", rate=1e-3), 2)
        out = s(np.zeros(2), np.array([3.0, -0.5]))
        np.testing.assert_allclose(out, [1e-3, -1e-3], rtol=1e-6)

    def test_uniform_start(self, rng):
        x, i, k0 = uniform_start([-1.0], [1.0], 3, 50)(1000, rng)
        assert x.shape == (1000, 1) and np.all(np.abs(x) <= 1)
        assert set(np.unique(i)) == {0, 1, 2}
        assert k0.min() >= 0 and k0.max() <= 49


class TestLog:
    def test_csv_and_windows(self, tmp_path):
        log = TrainingLog()
        for e in range(1, 6):
            log.add(e, float(e), 1.0, 0.1 * e)
        assert log.window_mean(1, 2) == 1.5
        assert log.window_mean(4, 10) == 4.5
        lines = log.to_csv(tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "episode,loss,param_norm,seconds"
        assert len(lines) == 6


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path, regulator, rng):
        ap = built_in("regulator", 2, 1, 1.0, regulator.terminal_reward)
        xi = ap.init(rng)
        path = save_checkpoint(tmp_path / "ck", xi, ap.describe(), families.model_hash(regulator), {"seed": 1})
        return path, xi, ap

    def test_round_trip(self, saved, regulator):
        path, xi, ap = saved
        loaded, header = load_checkpoint(path, ap.describe(), families.model_hash(regulator))
        np.testing.assert_array_equal(loaded, xi)
        assert loaded.tobytes() == xi.tobytes()
        assert header["lineage"] == {"seed": 1}

    def test_wrong_architecture(self, saved):
        path, _, ap = saved
        other = dict(ap.describe(), hidden=[64, 64])
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path, other)

    def test_tampered(self, saved):
        path, xi, _ = saved
        with np.load(path) as data:
            header = str(data["header"])
        np.savez(path, params=xi + 1e-12, header=np.array(header))
        with pytest.raises(HashMismatchError):
            load_checkpoint(path)

    def test_model_hash_mismatch(self, saved):
        path, _, _ = saved
        with pytest.raises(HashMismatchError):
            load_checkpoint(path, model_hash=families.model_hash(families.put_options()))

    def test_version(self, saved):
        path, xi, _ = saved
        import json
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
        header["version"] = 99
        np.savez(path, params=xi, header=np.array(json.dumps(header)))
        with pytest.raises(FormatVersionError):
            load_checkpoint(path)
