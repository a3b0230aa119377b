"""Forward Monte Carlo for the regime-modulated diffusion with a controlled regime chain.

Paths are simulated in blocks of ``BLOCK`` paths, each block drawing from its own
generator seeded by (seed, block index), so a path's randomness does not depend
on how the work is scheduled.  Within a step the action is drawn first, then the
Brownian increment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import ModelValidationError
from .model import RegimeIntensityRow, SwitchingModel, row_entropy
from .policy import GeneratorPolicy

BLOCK = 8192


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_steps: int
    batch: int = 1
    seed: int = 0
    clamp: bool = True
    exact_kernel: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1 or self.batch < 1:
            raise ModelValidationError("need dt > 0, n_steps >= 1 and batch >= 1")

    @classmethod
    def for_model(cls, model: SwitchingModel, n_steps: int, **kw) -> "SimConfig":
        return cls(model.horizon / n_steps, n_steps, **kw)

    def check(self, model: SwitchingModel) -> None:
        if abs(self.dt * self.n_steps - model.horizon) > 1e-12:
            raise ModelValidationError(
                f"dt * n_steps = {self.dt * self.n_steps!r} does not match horizon {model.horizon!r}"
            )


def by_regime(fn, t, x, i, m, trailing=()):
    """Evaluate a per-regime callback on a batch with mixed regimes."""
    i = np.asarray(i)
    first = int(i.flat[0]) if i.size else 0
    if i.size and np.all(i == first):
        return np.broadcast_to(fn(t, x, first), i.shape + tuple(trailing))
    out = np.empty(i.shape + tuple(trailing))
    for r in range(m):
        sel = i == r
        if np.any(sel):
            out[sel] = fn(t, x[sel], r)
    return out


def transition_probs(rows, i, dt, clamp=True, exact=False):
    """Categorical law of the next regime given generator rows (B, m); returns (probs, clamped mask).

    First-order kernel: P(i -> j) = pi_ij dt, stay with the remainder.  If the
    off-diagonal mass exceeds 1 it is rescaled to 1 (clamp) or rejected.
    ``exact`` uses the first-jump law 1 - exp(-q dt) split by pi_ij / q instead.
    """
    rows = np.asarray(rows, dtype=float)
    B, m = rows.shape
    idx = np.arange(B)
    if exact:
        # first jump of competing exponential clocks within dt, no second jump
        q = rows.copy()
        q[idx, i] = 0.0
        total = q.sum(axis=1)
        leave = -np.expm1(-total * dt)
        share = np.divide(q, total[:, None], out=np.zeros_like(q), where=total[:, None] > 0)
        P = share * leave[:, None]
        P[idx, i] = 1.0 - leave
        return P, np.zeros(B, dtype=bool)
    off = rows * dt
    off[idx, i] = 0.0
    mass = off.sum(axis=1)
    over = mass > 1.0
    if np.any(over):
        if not clamp:
            raise ModelValidationError(f"switch probability mass {mass.max():.4g} exceeds 1 and clamping is off")
        off[over] /= mass[over, None]
        mass = np.minimum(mass, 1.0)
    off[idx, i] = 1.0 - mass
    return off, over


def applied_rates(rows, i, dt, over):
    """Rows as actually realised by the sampler: clamped rows scaled to total rate 1/dt."""
    if not np.any(over):
        return rows
    rows = np.array(rows, dtype=float)
    idx = np.nonzero(over)[0]
    off = rows[idx].copy()
    off[np.arange(len(idx)), i[idx]] = 0.0
    scale = 1.0 / (off.sum(axis=1) * dt)
    off *= scale[:, None]
    off[np.arange(len(idx)), i[idx]] = -off.sum(axis=1)
    rows[idx] = off
    return rows


def sample_action(rows, i, dt, rng, clamp=True, exact=False):
    """Draw the next regime for every path; returns (j, clamped mask)."""
    P, over = transition_probs(rows, i, dt, clamp, exact)
    u = rng.random(len(P))
    j = (u[:, None] >= np.cumsum(P, axis=1)).sum(axis=1)
    return np.minimum(j, P.shape[1] - 1), over


class Environment:
    """Black-box step map (t, x, i, j) -> (x', j, f(t, x, i)) under pre-jump coefficients."""

    def __init__(self, model: SwitchingModel, dt: float, start=None):
        self.model = model
        self.dt = float(dt)
        self.start = start

    def reset(self, batch: int, rng: np.random.Generator):
        return initial_states(self.start, batch, self.model, rng)

    def step(self, t, x, i, j, rng: np.random.Generator):
        model, dt = self.model, self.dt
        n, d = model.state_dim, model.noise_dim
        zeta = rng.standard_normal((len(x), d))
        mu = by_regime(model.drift, t, x, i, model.m, (n,))
        sig = by_regime(model.vol, t, x, i, model.m, (n, d))
        reward = by_regime(model.running_reward, t, x, i, model.m)
        x_next = x + mu * dt + math.sqrt(dt) * np.einsum("bnd,bd->bn", sig, zeta)
        return x_next, np.asarray(j), reward, zeta


def initial_states(start, batch, model, rng):
    """``start`` is (x0, i0), or a callable (batch, rng) -> (x, i) or (x, i, start index)."""
    k0 = None
    if callable(start):
        drawn = start(batch, rng)
        x, i = drawn[0], drawn[1]
        if len(drawn) == 3:
            k0 = np.asarray(drawn[2], dtype=np.intp)
    else:
        if start is None:
            start = (np.zeros(model.state_dim), 0)
        x0, i0 = start
        x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (batch, model.state_dim))
        i = np.full(batch, int(i0))
    x = np.array(x, dtype=float).reshape(batch, model.state_dim)
    i = np.array(i, dtype=np.intp).reshape(batch)
    if np.any((i < 0) | (i >= model.m)):
        raise ModelValidationError("start regimes outside 0..m-1")
    return (x, i) if k0 is None else (x, i, k0)


def step(t, x, i, row: RegimeIntensityRow, model: SwitchingModel, rng, dt: float, clamp=True, exact=False):
    """Single-path step; returns (x', i', f(t, x, i), clamped)."""
    if row.source != i:
        raise ModelValidationError("policy row does not belong to the current regime")
    env = Environment(model, dt)
    j, over = sample_action(row.rates[None], np.array([i]), dt, rng, clamp, exact)
    x_next, j, reward, _ = env.step(t, np.asarray(x, float).reshape(1, -1), np.array([i]), j, rng)
    return x_next[0], int(j[0]), float(reward[0]), bool(over[0])


@dataclass
class EpisodePath:
    times: np.ndarray
    states: np.ndarray
    regimes: np.ndarray
    rewards: np.ndarray
    entropy: np.ndarray
    costs: np.ndarray
    noise: np.ndarray
    terminal: float

    @property
    def jumps(self) -> list[tuple[float, int]]:
        """(time of arrival, new regime) for every regime change."""
        k = np.nonzero(np.diff(self.regimes))[0]
        return [(float(self.times[s + 1]), int(self.regimes[s + 1])) for s in k]

    def payoff(self, temperature: float) -> float:
        dt = self.times[1] - self.times[0]
        return float(np.sum(self.rewards + temperature * self.entropy) * dt - self.costs.sum() + self.terminal)


@dataclass
class PathBatch:
    """Arrays for a batch: states (B, K+1, n), regimes (B, K+1), per-step quantities (B, K)."""

    times: np.ndarray
    states: np.ndarray
    regimes: np.ndarray
    rewards: np.ndarray
    entropy: np.ndarray
    costs: np.ndarray
    noise: np.ndarray
    terminal: np.ndarray
    clamps: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.regimes)

    def __getitem__(self, b) -> EpisodePath:
        return EpisodePath(
            self.times, self.states[b], self.regimes[b], self.rewards[b],
            self.entropy[b], self.costs[b], self.noise[b], float(self.terminal[b]),
        )

    def __iter__(self):
        return (self[b] for b in range(len(self)))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def payoffs(self, temperature: float) -> np.ndarray:
        run = (self.rewards + temperature * self.entropy).sum(axis=1) * self.dt
        return run - self.costs.sum(axis=1) + self.terminal

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n = self.states.shape[-1]
        K = len(self.times) - 1
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "k", "t", *(f"x{d}" for d in range(n)), "regime", "reward"])
            for b in range(len(self)):
                for k in range(K + 1):
                    r = repr(float(self.rewards[b, k])) if k < K else ""
                    xs = (repr(float(v)) for v in self.states[b, k])
                    w.writerow([b, k, repr(float(self.times[k])), *xs, int(self.regimes[b, k]), r])
        return path


def _blocks(batch):
    for start in range(0, batch, BLOCK):
        yield start // BLOCK, min(BLOCK, batch - start)


def _block_rng(seed, block):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))


def _rollout(model, policy: GeneratorPolicy, sim: SimConfig, start, size, rng, keep=True, value=None):
    """Simulate ``size`` paths; returns arrays (or running martingale sums when ``value`` is given)."""
    K, dt, lam = sim.n_steps, sim.dt, model.temperature
    env = Environment(model, dt, start)
    drawn = env.reset(size, rng)
    if len(drawn) == 3:
        raise ModelValidationError("simulate_batch paths all start at t = 0")
    x, i = drawn
    times = np.arange(K + 1) * dt
    if keep:
        states = np.empty((size, K + 1, model.state_dim))
        regimes = np.empty((size, K + 1), dtype=np.intp)
        rewards = np.empty((size, K))
        entropy = np.empty((size, K))
        costs = np.empty((size, K))
        noise = np.empty((size, K, model.noise_dim))
        states[:, 0], regimes[:, 0] = x, i
    running = np.zeros(size)
    clamps = 0
    v_now = value(times[0], x, i) if value is not None else None
    for k in range(K):
        t = times[k]
        gen = policy.generator(t, x)
        rows = gen[np.arange(size), i]
        j, over = sample_action(rows, i, dt, rng, sim.clamp, sim.exact_kernel)
        clamps += int(over.sum())
        x_next, j, f, zeta = env.step(t, x, i, j, rng)
        # the regulariser is charged on the law actually sampled
        ent = row_entropy(applied_rates(rows, i, dt, over), i)
        cost = model.switch_cost[i, j]
        inc = (f + lam * ent) * dt - cost
        if value is not None:
            v_next = value(times[k + 1], x_next, j)
            running += v_next - v_now + inc
            v_now = v_next
        else:
            running += inc
        if keep:
            rewards[:, k], entropy[:, k], costs[:, k], noise[:, k] = f, ent, cost, zeta
            states[:, k + 1], regimes[:, k + 1] = x_next, j
        x, i = x_next, j
    terminal = np.asarray(model.terminal_reward(x), dtype=float)
    if not keep:
        return running, terminal, clamps
    return PathBatch(times, states, regimes, rewards, entropy, costs, noise, terminal, clamps)


def simulate_batch(model: SwitchingModel, policy: GeneratorPolicy, sim: SimConfig, start=None) -> PathBatch:
    """Simulate ``sim.batch`` independent paths; deterministic given ``sim.seed``."""
    sim.check(model)
    parts = [_rollout(model, policy, sim, start, size, _block_rng(sim.seed, b)) for b, size in _blocks(sim.batch)]
    if len(parts) == 1:
        out = parts[0]
    else:
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        out = PathBatch(
            parts[0].times, cat("states"), cat("regimes"), cat("rewards"), cat("entropy"),
            cat("costs"), cat("noise"), cat("terminal"), sum(p.clamps for p in parts),
        )
    out.meta = {"seed": sim.seed, "config": asdict(sim), "steps": sim.batch * sim.n_steps}
    return out


@dataclass
class Estimate:
    mean: float
    stderr: float
    paths: int
    clamps: int
    steps: int

    @property
    def clamp_rate(self) -> float:
        return self.clamps / self.steps if self.steps else 0.0

    def z(self, target: float) -> float:
        return (self.mean - target) / self.stderr if self.stderr > 0 else math.inf


def _streamed(model, policy, sim, start, value):
    sim.check(model)
    total = total_sq = 0.0
    clamps = 0
    for b, size in _blocks(sim.batch):
        running, terminal, c = _rollout(model, policy, sim, start, size, _block_rng(sim.seed, b), keep=False, value=value)
        y = running if value is not None else running + terminal
        total += float(y.sum())
        total_sq += float(np.dot(y, y))
        clamps += c
    n = sim.batch
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return Estimate(mean, math.sqrt(var / n), n, clamps, n * sim.n_steps)


def estimate_payoff(model, policy, sim: SimConfig, start=None) -> Estimate:
    """Streaming mean and standard error of the exploratory payoff; nothing per-path is kept."""
    return _streamed(model, policy, sim, start, None)


def estimate_martingale_total(model, policy, value: Callable, sim: SimConfig, start=None) -> Estimate:
    """Streaming mean and standard error of sum_k Delta M_k along simulated paths."""
    return _streamed(model, policy, sim, start, value)


def martingale_increments(path: EpisodePath, value: Callable, model: SwitchingModel) -> np.ndarray:
    """Delta M_k = v(t_{k+1}) - v(t_k) + (f + lambda R) dt - g_{I_k I_{k+1}} along one path."""
    t = path.times
    v = np.array([
        float(np.asarray(value(t[k], path.states[k][None], np.array([path.regimes[k]])))[0])
        for k in range(len(t))
    ])
    dt = t[1] - t[0]
    return np.diff(v) + (path.rewards + model.temperature * path.entropy) * dt - path.costs


def field_value(field):
    """Adapter turning a ValueField into value(t, x (B, n), i (B,)) -> (B,)."""
    return lambda t, x, i: field.interpolate_regime(t, x, i)


def write_manifest(path, sim: SimConfig, model_hash: str, clamps: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "package_version": __version__,
        "sim": asdict(sim),
        "block_size": BLOCK,
        "model_hash": model_hash,
        "clamps": clamps,
    }
    doc.update(extra or {})
    path.write_text(json.dumps(doc, indent=2))
    return path
