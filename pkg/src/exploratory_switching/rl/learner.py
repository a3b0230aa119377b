"""Model-free policy evaluation and improvement from simulated episodes.

The learner only talks to the environment through ``reset`` and ``step``; from
the model it reads the switching costs, the temperature and the horizon, which
define the policy family and the payoff, never the dynamics.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelValidationError, TrainingDivergedError
from ..model import EXPONENT_CAP, SwitchingModel, optimal_generator, row_entropy
from ..simulator import Environment, SimConfig, applied_rates, sample_action

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "adam", "robbins-monro")
MAX_PARAM_NORM = 1e6


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 1000
    batch: int = 64
    rate: float = 1e-3
    schedule: str = "adam"
    mode: str = "offline"
    seed: int = 0
    # robbins-monro: alpha(i) = A / (i**nu + B)
    A: float = 1.0
    B: float = 1.0
    nu: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clamp: bool = True

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ModelValidationError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in ("offline", "online"):
            raise ModelValidationError("mode must be 'offline' or 'online'")
        if self.episodes < 0 or self.batch < 1:
            raise ModelValidationError("need episodes >= 0 and batch >= 1")
        if self.schedule == "robbins-monro" and not (self.A > 0 and self.B > 0 and 0 < self.nu <= 1):
            raise ModelValidationError("robbins-monro needs A > 0, B > 0 and 0 < nu <= 1")
        if self.schedule != "robbins-monro" and self.rate <= 0:
            raise ModelValidationError("rate must be positive")


class Stepper:
    """Applies xi <- xi + step(direction) for the configured schedule; counts updates from 1."""

    def __init__(self, cfg: TrainConfig, size: int):
        self.cfg = cfg
        self.count = 0
        self.m1 = np.zeros(size)
        self.m2 = np.zeros(size)

    def rate(self, i: int) -> float:
        c = self.cfg
        if c.schedule == "robbins-monro":
            return c.A / (i**c.nu + c.B)
        return c.rate

    def __call__(self, xi, direction):
        self.count += 1
        c = self.cfg
        if c.schedule != "adam":
            return xi + self.rate(self.count) * direction
        self.m1 = c.beta1 * self.m1 + (1 - c.beta1) * direction
        self.m2 = c.beta2 * self.m2 + (1 - c.beta2) * direction**2
        mhat = self.m1 / (1 - c.beta1**self.count)
        vhat = self.m2 / (1 - c.beta2**self.count)
        return xi + c.rate * mhat / (np.sqrt(vhat) + c.eps)


def policy_from_params(approx, xi, t, x, model: SwitchingModel, cap: float = EXPONENT_CAP) -> np.ndarray:
    """Generator matrices (N, m, m) of the exponential policy built on v^xi at (t, x)."""
    return optimal_generator(approx.all_regimes(xi, t, x), model.switch_cost, model.temperature, cap)


def delta_xi(v_now, v_next, reward, entropy, cost, dt, temperature):
    """v(t_{k+1}) - v(t_k) + (f + lambda R) dt - g_{I_k I_{k+1}}, elementwise."""
    return v_next - v_now + (reward + temperature * entropy) * dt - cost


@dataclass
class TrainingLog:
    episodes: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    norms: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    clamps: int = 0
    steps: int = 0

    def add(self, episode, loss, norm, seconds):
        self.episodes.append(episode)
        self.losses.append(loss)
        self.norms.append(norm)
        self.seconds.append(seconds)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "loss", "param_norm", "seconds"])
            for row in zip(self.episodes, self.losses, self.norms, self.seconds):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return path

    def window_mean(self, first: int, last: int) -> float:
        """Mean loss over 1-based episodes first..last."""
        sel = [l for e, l in zip(self.episodes, self.losses) if first <= e <= last]
        return float(np.mean(sel)) if sel else float("nan")


def uniform_start(lower, upper, m: int, n_steps: int | None = None):
    """Start sampler: x uniform on the box, regime uniform on 0..m-1.

    With ``n_steps`` each episode also starts at a uniform time index in
    0..n_steps-1 (returned as a third array); earlier steps are idle.
    """
    lower = np.atleast_1d(np.asarray(lower, float))
    upper = np.atleast_1d(np.asarray(upper, float))

    def sample(batch, rng):
        x = rng.uniform(lower, upper, size=(batch, len(lower)))
        i = rng.integers(0, m, size=batch)
        if n_steps is None:
            return x, i
        return x, i, rng.integers(0, n_steps, size=batch)

    return sample


def _reset(env, batch, rng):
    out = env.reset(batch, rng)
    if len(out) == 3:
        return out
    x, i = out
    return x, i, np.zeros(batch, dtype=np.intp)


def _episode_rng(seed, episode):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode)]))


def _guard(xi, loss, episode):
    if not math.isfinite(loss):
        raise TrainingDivergedError(episode, "loss is not finite")
    norm = float(np.linalg.norm(xi))
    if not math.isfinite(norm) or norm > MAX_PARAM_NORM:
        raise TrainingDivergedError(episode, f"parameter norm {norm:.3g} exceeds {MAX_PARAM_NORM:g}")
    return norm


def _rollout(approx, xi, env, model, sim, batch, rng, clamp, stats):
    """One batch of episodes under pi^xi; returns the per-step records (K on the leading axis)."""
    K, dt = sim.n_steps, sim.dt
    x, i, k0 = _reset(env, batch, rng)
    idx = np.arange(batch)
    xs, regs = [x], [i]
    vals, rewards, ents, costs, active = [], [], [], [], []
    for k in range(K):
        t = k * dt
        live = k >= k0
        V = approx.all_regimes(xi, t, x)
        gen = optimal_generator(V, model.switch_cost, model.temperature)
        rows = gen[idx, i]
        j, over = sample_action(rows, i, dt, rng, clamp)
        x_next, j, f = env.step(t, x, i, j, rng)[:3]
        # idle paths keep their start state until their clock begins
        x_next = np.where(live[:, None], x_next, x)
        j = np.where(live, j, i)
        over &= live
        stats.clamps += int(over.sum())
        stats.steps += int(live.sum())
        vals.append(V[idx, i])
        rewards.append(f)
        ents.append(row_entropy(applied_rates(rows, i, dt, over), i))
        costs.append(model.switch_cost[i, j])
        active.append(live)
        x, i = x_next, np.asarray(j)
        xs.append(x)
        regs.append(i)
    return (np.array(xs), np.array(regs), np.array(vals), np.array(rewards), np.array(ents),
            np.array(costs), np.array(active))


def _offline_episode(approx, xi, env, model, sim, cfg, rng, stepper, stats):
    K, dt, B = sim.n_steps, sim.dt, cfg.batch
    X, I, V, F, R, C, A = _rollout(approx, xi, env, model, sim, B, rng, cfg.clamp, stats)
    t_all = np.arange(K + 1) * dt
    v_last = approx.values(xi, model.horizon, X[K], I[K])
    v_next = np.concatenate([V[1:], v_last[None]], axis=0)
    D = np.where(A, delta_xi(V, v_next, F, R, C, dt, model.temperature), 0.0)
    tt = np.repeat(t_all[:K], B)
    psi = approx.vjp(xi, tt, X[:K].reshape(K * B, -1), I[:K].reshape(-1), D.reshape(-1) / B)
    return stepper(xi, psi), float(psi @ psi)


def _online_episode(approx, xi, env, model, sim, cfg, rng, stepper, stats):
    K, dt, B = sim.n_steps, sim.dt, cfg.batch
    x, i, k0 = _reset(env, B, rng)
    idx = np.arange(B)
    total = np.zeros_like(xi)
    for k in range(K):
        t = k * dt
        live = k >= k0
        V = approx.all_regimes(xi, t, x)
        gen = optimal_generator(V, model.switch_cost, model.temperature)
        rows = gen[idx, i]
        j, over = sample_action(rows, i, dt, rng, cfg.clamp)
        x_next, j, f = env.step(t, x, i, j, rng)[:3]
        x_next = np.where(live[:, None], x_next, x)
        j = np.where(live, np.asarray(j), i)
        over &= live
        stats.clamps += int(over.sum())
        stats.steps += int(live.sum())
        v_next = approx.values(xi, t + dt, x_next, j)
        d = delta_xi(V[idx, i], v_next, f, row_entropy(applied_rates(rows, i, dt, over), i), model.switch_cost[i, j], dt, model.temperature)
        psi = approx.vjp(xi, t, x, i, np.where(live, d, 0.0) / B)
        total += psi
        xi = stepper(xi, psi)
        x, i = x_next, j
    return xi, float(total @ total)


def train(
    model: SwitchingModel,
    sim: SimConfig,
    cfg: TrainConfig,
    approx,
    env=None,
    params=None,
    start=None,
    trace=None,
):
    """Run the episode loop; returns (params, TrainingLog).

    ``trace`` is called as trace(episode, xi) after every update, for diagnostics.
    """
    sim.check(model)
    env = env or Environment(model, sim.dt, start)
    xi = approx.init(np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31 - 1]))) if params is None else np.array(params, dtype=float)
    if xi.shape != (approx.n_params,):
        raise ModelValidationError(f"initial parameters have shape {xi.shape}, expected ({approx.n_params},)")
    stepper = Stepper(cfg, len(xi))
    run = _offline_episode if cfg.mode == "offline" else _online_episode
    out = TrainingLog()
    started = time.perf_counter()
    for ep in range(1, cfg.episodes + 1):
        xi, loss = run(approx, xi, env, model, sim, cfg, _episode_rng(cfg.seed, ep), stepper, out)
        norm = _guard(xi, loss, ep)
        out.add(ep, loss, norm, time.perf_counter() - started)
        if trace is not None:
            trace(ep, xi)
        if ep % 100 == 0:
            log.info("episode %d loss %.4g |xi| %.4g", ep, loss, norm)
    return xi, out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def orthogonality_solution(model, approx, sim: SimConfig, start, batch: int, seed: int) -> np.ndarray:
    """Parameters solving the batch orthogonality system for a regime-blind linear approximator.

    Under such an approximator the policy does not depend on xi, so Delta_k is
    affine in xi and the system sum phi_k Delta_k = 0 is linear; it is solved by
    least squares over one fixed batch.
    """
    zero = np.zeros(approx.n_params)
    env = Environment(model, sim.dt, start)

    class _Stats:
        clamps = steps = 0

    X, I, V, F, R, C, A = _rollout(approx, zero, env, model, sim, batch, _episode_rng(seed, 0), True, _Stats())
    K, dt = sim.n_steps, sim.dt
    t_all = np.arange(K + 1) * dt
    phi = np.stack([approx.features(t_all[k], X[k]) for k in range(K + 1)])  # (K+1, B, p)
    h = np.stack([np.asarray(approx.terminal(X[k]), float) for k in range(K + 1)])
    a = (h[1:] - h[:-1] + (F + model.temperature * R) * dt - C) * A
    b = (phi[1:] - phi[:-1]) * A[..., None]
    lhs = np.einsum("kbp,kbq->pq", phi[:-1], b)
    rhs = -np.einsum("kbp,kb->p", phi[:-1], a)
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol
