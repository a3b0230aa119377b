"""Problem definition and the closed-form formulas every solver shares.

Model callbacks are vectorised over leading axes of the state argument:

* ``drift(t, x, i)``           x: (..., n)  ->  (..., n)
* ``vol(t, x, i)``             x: (..., n)  ->  (..., n, d)
* ``running_reward(t, x, i)``  x: (..., n)  ->  (...)
* ``terminal_reward(x)``       x: (..., n)  ->  (...)

``t`` is a float and ``i`` an integer regime index in ``0..m-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import IntensityOverflowError, ModelValidationError

log = logging.getLogger(__name__)

EXPONENT_CAP = 700.0

Drift = Callable[[float, np.ndarray, int], np.ndarray]
Reward = Callable[[float, np.ndarray, int], np.ndarray]
Terminal = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """Dynamics, rewards, switching costs, temperature and horizon of one problem."""

    m: int
    state_dim: int
    drift: Drift
    vol: Drift
    running_reward: Reward
    terminal_reward: Terminal
    switch_cost: np.ndarray
    temperature: float
    horizon: float
    reward_bound: float
    noise_dim: int = 1
    descriptor: dict[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self):
        g = np.array(self.switch_cost, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "switch_cost", g)
        validate_model(self)

    def with_temperature(self, temperature: float) -> "SwitchingModel":
        desc = None
        if self.descriptor is not None:
            desc = dict(self.descriptor, **{"lambda": float(temperature)})
        return _replace(self, temperature=float(temperature), descriptor=desc)

    def with_costs(self, switch_cost) -> "SwitchingModel":
        desc = None
        if self.descriptor is not None:
            desc = dict(self.descriptor, costs=np.asarray(switch_cost, float).tolist())
        return _replace(self, switch_cost=np.asarray(switch_cost, float), descriptor=desc)


def _replace(model: SwitchingModel, **changes) -> SwitchingModel:
    kwargs = {name: getattr(model, name) for name in model.__dataclass_fields__}
    kwargs.update(changes)
    return SwitchingModel(**kwargs)


def validate_model(model: SwitchingModel) -> None:
    g = model.switch_cost
    m = model.m
    if m < 2:
        raise ModelValidationError(f"need at least 2 regimes, got m={m}")
    if model.state_dim < 1:
        raise ModelValidationError("state_dim must be positive")
    if g.shape != (m, m):
        raise ModelValidationError(f"switch_cost must be {m}x{m}, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ModelValidationError("switch_cost entries must be finite")
    if np.any(np.diag(g) != 0.0):
        raise ModelValidationError("switch_cost diagonal must be exactly zero")
    off = ~np.eye(m, dtype=bool)
    if np.any(g[off] <= 0.0):
        raise ModelValidationError("off-diagonal switching costs must be strictly positive")
    for i in range(m):
        for j in range(m):
            for k in range(m):
                if len({i, j, k}) == 3 and not g[i, k] < g[i, j] + g[j, k]:
                    raise ModelValidationError(
                        f"triangle condition violated: g[{i},{k}]={g[i, k]} >= "
                        f"g[{i},{j}]+g[{j},{k}]={g[i, j] + g[j, k]}"
                    )
    if not model.temperature > 0:
        raise ModelValidationError("temperature must be > 0")
    if not model.horizon > 0:
        raise ModelValidationError("horizon must be > 0")
    if not model.reward_bound >= 0:
        raise ModelValidationError("reward_bound must be >= 0")


@dataclass(frozen=True)
class RegimeIntensityRow:
    """Row ``i`` of a generator: nonnegative off-diagonal rates, zero row sum."""

    source: int
    rates: np.ndarray

    def __post_init__(self):
        r = np.array(self.rates, dtype=float)
        if not 0 <= self.source < r.size:
            raise ModelValidationError(f"source {self.source} outside 0..{r.size - 1}")
        off = np.delete(r, self.source)
        if np.any(off < 0) or not np.all(np.isfinite(r)):
            raise ModelValidationError("off-diagonal rates must be finite and nonnegative")
        if abs(r.sum()) > 1e-12 * max(1.0, off.sum()):
            raise ModelValidationError(f"row must sum to zero, got {r.sum():.3e}")
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)

    @classmethod
    def from_offdiagonal(cls, source: int, rates) -> "RegimeIntensityRow":
        r = np.array(rates, dtype=float)
        r[source] = 0.0
        r[source] = -r.sum()
        return cls(source, r)

    @property
    def total(self) -> float:
        return -float(self.rates[self.source])


def row_entropy(rates: np.ndarray, source) -> np.ndarray:
    """Vectorised regulariser for rows ``rates[..., :]`` leaving ``source``.

    Uses 0 log 0 = 0. ``source`` broadcasts against ``rates[..., 0]``.
    """
    rates = np.asarray(rates, dtype=float)
    m = rates.shape[-1]
    mask = np.arange(m) != np.asarray(source)[..., None]
    safe = np.where(rates > 0, rates, 1.0)
    terms = np.where(rates > 0, rates - rates * np.log(safe), 0.0)
    return np.sum(np.where(mask, terms, 0.0), axis=-1)


def entropy_regularizer(row: RegimeIntensityRow) -> float:
    return float(row_entropy(row.rates, row.source))


def optimal_exponents(values: np.ndarray, switch_cost: np.ndarray, temperature: float) -> np.ndarray:
    """(V_j - g_ij - V_i) / lambda for all (i, j); shape (..., m, m)."""
    v = np.asarray(values, dtype=float)
    return (v[..., None, :] - switch_cost - v[..., :, None]) / temperature


def optimal_generator(
    values: np.ndarray,
    switch_cost: np.ndarray,
    temperature: float,
    cap: float = EXPONENT_CAP,
) -> np.ndarray:
    """Full generator matrices of the exponential policy for values (..., m).

    Diagonal entries hold the negative row sums.
    """
    z = optimal_exponents(values, switch_cost, temperature)
    m = z.shape[-1]
    eye = np.eye(m, dtype=bool)
    z = np.where(eye, -np.inf, z)
    zmax = np.max(z)
    if zmax > cap or np.isnan(zmax):
        _raise_overflow(z, cap)
    rates = np.exp(z)
    rates[..., eye] = -rates.sum(axis=-1)
    return rates


def _raise_overflow(z, cap):
    bad = np.argwhere(~(z <= cap))[0]
    i, j = int(bad[-2]), int(bad[-1])
    raise IntensityOverflowError(i, j, float(z[tuple(bad)]), cap)


def optimal_intensity(
    value_at_point, i: int, model: SwitchingModel, cap: float = EXPONENT_CAP
) -> RegimeIntensityRow:
    v = np.asarray(value_at_point, dtype=float)
    if v.shape != (model.m,) or not np.all(np.isfinite(v)):
        raise ModelValidationError("value_at_point must be a finite length-m vector")
    gen = optimal_generator(v, model.switch_cost, model.temperature, cap)
    return RegimeIntensityRow(i, gen[i])


def hamiltonian(row: RegimeIntensityRow, y, model: SwitchingModel) -> float:
    """sum_j pi_ij (y_j - g_ij - y_i) + lambda R(pi, i)."""
    y = np.asarray(y, dtype=float)
    i = row.source
    mask = np.arange(model.m) != i
    gain = y[mask] - model.switch_cost[i, mask] - y[i]
    return float(np.dot(row.rates[mask], gain) + model.temperature * entropy_regularizer(row))


def bound_constant_K(model: SwitchingModel) -> float:
    lam = model.temperature
    g = model.switch_cost
    off = ~np.eye(model.m, dtype=bool)
    sums = np.where(off, np.exp(-g / lam), 0.0).sum(axis=1)
    return float(model.reward_bound + lam * sums.max())


def value_bound(model: SwitchingModel, t) -> np.ndarray | float:
    """A-priori bound K (T - t) + K_{f,h} on |V_i(t, x)|."""
    return bound_constant_K(model) * (model.horizon - np.asarray(t, float)) + model.reward_bound


def verify_reward_bound(model: SwitchingModel, lower, upper, nodes: int = 2001, times: int = 11) -> float:
    """Dense scan of sup |f| + |h| over a box; logs a warning if the declared bound is beaten.

    Returns the observed supremum.
    """
    axes = [np.linspace(lo, hi, nodes) for lo, hi in zip(np.atleast_1d(lower), np.atleast_1d(upper))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    h = np.abs(model.terminal_reward(pts))
    worst = 0.0
    for t in np.linspace(0.0, model.horizon, times):
        for i in range(model.m):
            worst = max(worst, float(np.max(np.abs(model.running_reward(t, pts, i)) + h)))
    if worst > model.reward_bound * (1 + 1e-12):
        log.warning("declared reward bound %.6g below scanned supremum %.6g", model.reward_bound, worst)
    return worst


def ellipticity_constant(model: SwitchingModel, points: np.ndarray, t: float = 0.0) -> float:
    """Smallest eigenvalue of sigma sigma^T over the given points and all regimes."""
    lowest = np.inf
    for i in range(model.m):
        s = model.vol(t, points, i)
        a = s @ np.swapaxes(s, -1, -2)
        lowest = min(lowest, float(np.linalg.eigvalsh(a).min()))
    return lowest
