"""Built-in model families and their JSON descriptors.

A descriptor is a plain mapping with keys ``model``, ``params``, ``costs``,
``lambda`` and ``horizon``; ``params`` and ``costs`` may be partial, missing
entries take the family defaults.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ModelValidationError
from .model import SwitchingModel

REGULATOR_DEFAULTS = {
    "mu": [-2.0, 2.0],
    "sigma": 0.5,
    "bump_height": 2.0,
    "bump_width": 2.0,
    "running_offset": 0.1,
}
REGULATOR_COSTS = [[0.0, 0.5], [0.5, 0.0]]

PUT_DEFAULTS = {
    "mu_a": 0.1,
    "sigma_a": 0.2,
    "mu_b": 0.05,
    "sigma_b": 0.1,
    "rate": 0.05,
    "strike": 1.0,
    "rho": 1.0,
}
PUT_COSTS = [[0.0, 0.02, 0.01], [0.02, 0.0, 0.01], [0.02, 0.02, 0.0]]

LINEAR_DEFAULTS = {"intercept": 0.5, "slope": 1.0, "sigma": 0.5, "box": 3.0}
LINEAR_COSTS = [[0.0, 0.5], [0.5, 0.0]]

FAMILIES = ("regulator", "put-options", "linear-toy")


def regulator(
    temperature: float = 0.2,
    horizon: float = 1.0,
    costs=None,
    **params,
) -> SwitchingModel:
    """Two-regime bounded regulator: dX = mu_i dt + sigma dW, Gaussian-bump rewards."""
    p = dict(REGULATOR_DEFAULTS)
    _merge(p, params, "regulator")
    mu = np.asarray(p["mu"], dtype=float)
    sigma = float(p["sigma"])
    height, width, offset = float(p["bump_height"]), float(p["bump_width"]), float(p["running_offset"])
    costs = REGULATOR_COSTS if costs is None else costs

    def drift(t, x, i):
        return np.full(np.shape(x), mu[i])

    def vol(t, x, i):
        return np.full(np.shape(x) + (1,), sigma)

    def running_reward(t, x, i):
        return height * np.exp(-width * x[..., 0] ** 2) - offset

    def terminal_reward(x):
        return height * np.exp(-width * x[..., 0] ** 2)

    # the bump peaks at x = 0, where |f| + |h| is largest
    bound = abs(height - offset) + abs(height)
    desc = _descriptor("regulator", p, costs, temperature, horizon)
    return SwitchingModel(
        m=len(mu),
        state_dim=1,
        drift=drift,
        vol=vol,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        switch_cost=np.asarray(costs, dtype=float),
        temperature=float(temperature),
        horizon=float(horizon),
        reward_bound=bound,
        noise_dim=1,
        descriptor=desc,
    )


def put_options(
    temperature: float = 0.1,
    horizon: float = 1.0,
    costs=None,
    **params,
) -> SwitchingModel:
    """Three regimes: put on stock A, put on stock B, savings account.

    Both stocks are driven by Brownian motions with correlation ``rho``.
    """
    p = dict(PUT_DEFAULTS)
    _merge(p, params, "put-options")
    mu = np.array([p["mu_a"], p["mu_b"]], dtype=float)
    sa, sb, rho = float(p["sigma_a"]), float(p["sigma_b"]), float(p["rho"])
    if not -1.0 <= rho <= 1.0:
        raise ModelValidationError(f"rho must lie in [-1, 1], got {rho}")
    loading = np.array([[sa, 0.0], [rho * sb, np.sqrt(max(0.0, 1.0 - rho**2)) * sb]])
    strike, rate = float(p["strike"]), float(p["rate"])
    costs = PUT_COSTS if costs is None else costs

    def drift(t, x, i):
        return mu * x

    def vol(t, x, i):
        return x[..., :, None] * loading

    def running_reward(t, x, i):
        if i == 0:
            return np.maximum(strike - x[..., 0], 0.0)
        if i == 1:
            return np.maximum(strike - x[..., 1], 0.0)
        return np.full(x.shape[:-1], rate * strike)

    def terminal_reward(x):
        return np.zeros(x.shape[:-1])

    desc = _descriptor("put-options", p, costs, temperature, horizon)
    return SwitchingModel(
        m=3,
        state_dim=2,
        drift=drift,
        vol=vol,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        switch_cost=np.asarray(costs, dtype=float),
        temperature=float(temperature),
        horizon=float(horizon),
        # prices live on [0, inf): the put payoff is at most the strike
        reward_bound=max(strike, abs(rate * strike)),
        noise_dim=2,
        descriptor=desc,
    )


def linear_toy(
    temperature: float = 0.2,
    horizon: float = 1.0,
    costs=None,
    **params,
) -> SwitchingModel:
    """Driftless diffusion, f = a + b x in every regime, h = 0.

    Regimes are interchangeable, so the exploratory value is
    (T - t) (a + lambda sum_j exp(-g_ij / lambda) + b x), linear in x.
    ``box`` only sets the declared reward bound (f is unbounded on the line).
    """
    p = dict(LINEAR_DEFAULTS)
    _merge(p, params, "linear-toy")
    a, b, sigma, box = float(p["intercept"]), float(p["slope"]), float(p["sigma"]), float(p["box"])
    costs = np.asarray(LINEAR_COSTS if costs is None else costs, dtype=float)
    m = len(costs)
    sums = np.where(np.eye(m, dtype=bool), 0.0, np.exp(-costs / temperature)).sum(axis=1)
    if not np.allclose(sums, sums[0]):
        raise ModelValidationError("linear toy needs equal exp(-g/lambda) row sums for an in-span solution")

    def drift(t, x, i):
        return np.zeros(np.shape(x))

    def vol(t, x, i):
        return np.full(np.shape(x) + (1,), sigma)

    def running_reward(t, x, i):
        return a + b * x[..., 0]

    def terminal_reward(x):
        return np.zeros(np.shape(x)[:-1])

    desc = _descriptor("linear-toy", p, costs, temperature, horizon)
    return SwitchingModel(
        m=m,
        state_dim=1,
        drift=drift,
        vol=vol,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        switch_cost=costs,
        temperature=float(temperature),
        horizon=float(horizon),
        reward_bound=abs(a) + abs(b) * box,
        noise_dim=1,
        descriptor=desc,
    )


def linear_toy_solution(model: SwitchingModel) -> np.ndarray:
    """(xi_0, xi_1) of the exact value (T - t)(xi_0 + xi_1 x) of the linear toy."""
    p = model.descriptor["params"]
    g = model.switch_cost
    lam = model.temperature
    extra = np.where(np.eye(model.m, dtype=bool), 0.0, np.exp(-g / lam)).sum(axis=1)[0]
    return np.array([p["intercept"] + lam * extra, p["slope"]])


def _merge(p: dict, params: dict, family: str) -> None:
    unknown = set(params) - set(p)
    if unknown:
        raise ModelValidationError(f"unknown {family} parameters: {sorted(unknown)}")
    p.update(params)


def _descriptor(family, params, costs, temperature, horizon) -> dict[str, Any]:
    return {
        "model": family,
        "params": {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for k, v in params.items()},
        "costs": np.asarray(costs, dtype=float).tolist(),
        "lambda": float(temperature),
        "horizon": float(horizon),
    }


def from_descriptor(desc: dict[str, Any]) -> SwitchingModel:
    if not isinstance(desc, dict):
        raise ModelValidationError("model descriptor must be a JSON object")
    allowed = {"model", "params", "costs", "lambda", "horizon"}
    extra = set(desc) - allowed
    if extra:
        raise ModelValidationError(f"unknown descriptor fields: {sorted(extra)}")
    family = desc.get("model")
    kwargs: dict[str, Any] = dict(desc.get("params") or {})
    if "costs" in desc:
        kwargs["costs"] = desc["costs"]
    if "lambda" in desc:
        kwargs["temperature"] = float(desc["lambda"])
    if "horizon" in desc:
        kwargs["horizon"] = float(desc["horizon"])
    if family == "regulator":
        return regulator(**kwargs)
    if family == "put-options":
        return put_options(**kwargs)
    if family == "linear-toy":
        return linear_toy(**kwargs)
    raise ModelValidationError(f"unknown model family {family!r}; expected one of {FAMILIES}")


def load_descriptor(path) -> SwitchingModel:
    path = Path(path)
    try:
        desc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return from_descriptor(desc)


def build(family: str, **overrides) -> SwitchingModel:
    desc = {"model": family}
    desc.update({k: v for k, v in overrides.items() if v is not None})
    return from_descriptor(desc)


def model_hash(model: SwitchingModel) -> str:
    """Stable short hash of a model's descriptor (or of its numeric fields)."""
    if model.descriptor is not None:
        payload = model.descriptor
    else:
        payload = {
            "model": "custom",
            "m": model.m,
            "state_dim": model.state_dim,
            "costs": model.switch_cost.tolist(),
            "lambda": model.temperature,
            "horizon": model.horizon,
            "reward_bound": model.reward_bound,
            "callbacks": [
                getattr(fn, "__qualname__", repr(fn))
                for fn in (model.drift, model.vol, model.running_reward, model.terminal_reward)
            ],
        }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
