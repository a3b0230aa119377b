"""Function approximators for v(t, x, i) with hand-written reverse mode.

All approximators share one calling convention: ``values(xi, t, x, i)`` for
batched inputs t (N,), x (N, n), i (N,) returns (N,), and ``vjp`` returns
sum_k cot_k * dv_k/dxi as a flat vector of the parameter length.  The terminal
condition is structural: v = h(x) + (T - t) * N(...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArchitectureMismatchError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass(frozen=True)
class Architecture:
    """Fully connected net: input -> hidden layers -> linear output."""

    input_dim: int
    hidden: tuple[int, ...]
    activations: tuple[str, ...]
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.hidden) != len(self.activations):
            raise ArchitectureMismatchError("one activation per hidden layer is required")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ArchitectureMismatchError(f"unknown activations {sorted(bad)}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.widths
        return [((w[k], w[k + 1]), (w[k + 1],)) for k in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for (a, b), _ in self.shapes)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activations": list(self.activations),
            "output_dim": self.output_dim,
        }

    def unpack(self, xi: np.ndarray):
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.n_params,):
            raise ArchitectureMismatchError(f"expected {self.n_params} parameters, got shape {xi.shape}")
        layers, pos = [], 0
        for (a, b), _ in self.shapes:
            W = xi[pos:pos + a * b].reshape(a, b)
            pos += a * b
            c = xi[pos:pos + b]
            pos += b
            layers.append((W, c))
        return layers

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        parts = []
        for (a, b), _ in self.shapes:
            bound = 1.0 / np.sqrt(a)
            parts.append(rng.uniform(-bound, bound, a * b))
            parts.append(rng.uniform(-bound, bound, b))
        return np.concatenate(parts)

    def forward(self, xi, inputs):
        """Outputs (N, output_dim) plus the cache needed by ``backward``."""
        layers = self.unpack(xi)
        a = np.asarray(inputs, dtype=float)
        cache = []
        for k, (W, c) in enumerate(layers):
            z = a @ W + c
            name = self.activations[k] if k < len(self.hidden) else "identity"
            out = _act(name, z)
            cache.append((a, z, out, name))
            a = out
        return a, cache

    def backward(self, xi, cache, cot):
        """Gradient of sum(cot * outputs) with respect to the flat parameters."""
        layers = self.unpack(xi)
        grads = [None] * len(layers)
        delta = np.asarray(cot, dtype=float)
        for k in range(len(layers) - 1, -1, -1):
            a_in, z, out, name = cache[k]
            delta = delta * _act_grad(name, z, out)
            grads[k] = (a_in.T @ delta, delta.sum(axis=0))
            if k:
                delta = delta @ layers[k][0].T
        return np.concatenate([np.concatenate([gW.ravel(), gc]) for gW, gc in grads])


class MLPValue:
    """v(t, x, i) = h(x) + (T - t) * N(t, x, onehot(i)), or per-regime output heads."""

    def __init__(self, arch: Architecture, m: int, state_dim: int, horizon: float, terminal, heads: bool = False):
        want_in = 1 + state_dim + (0 if heads else m)
        want_out = m if heads else 1
        if arch.input_dim != want_in or arch.output_dim != want_out:
            raise ArchitectureMismatchError(
                f"architecture {arch.input_dim}->{arch.output_dim} does not fit "
                f"{'heads' if heads else 'one-hot'} input {want_in}->{want_out}"
            )
        self.arch = arch
        self.m = m
        self.state_dim = state_dim
        self.horizon = float(horizon)
        self.terminal = terminal
        self.heads = heads

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    def describe(self) -> dict:
        d = self.arch.to_dict()
        d.update({"m": self.m, "state_dim": self.state_dim, "heads": self.heads})
        return d

    def init(self, rng) -> np.ndarray:
        return self.arch.init(rng)

    def _inputs(self, t, x, i):
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        cols = [t[:, None], x]
        if not self.heads:
            cols.append(np.eye(self.m)[i])
        return np.concatenate(cols, axis=1)

    def _pick(self, out, i):
        if self.heads:
            return out[np.arange(len(out)), i]
        return out[:, 0]

    def values(self, xi, t, x, i) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        i = np.asarray(i, dtype=np.intp).reshape(-1)
        out, _ = self.arch.forward(xi, self._inputs(t, x, i))
        tau = self.horizon - np.broadcast_to(np.asarray(t, float), (len(x),))
        return self.terminal(x) + tau * self._pick(out, i)

    def all_regimes(self, xi, t, x) -> np.ndarray:
        """Values of every regime at the same (t, x): (N, m)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        N = len(x)
        tau = self.horizon - np.broadcast_to(np.asarray(t, float), (N,))
        h = self.terminal(x)
        if self.heads:
            out, _ = self.arch.forward(xi, self._inputs(t, x, np.zeros(N, np.intp)))
            return h[:, None] + tau[:, None] * out
        reps = np.repeat(np.arange(self.m)[None], N, axis=0).reshape(-1)
        xx = np.repeat(x, self.m, axis=0)
        tt = np.repeat(np.broadcast_to(np.asarray(t, float), (N,)), self.m)
        out, _ = self.arch.forward(xi, self._inputs(tt, xx, reps))
        return h[:, None] + tau[:, None] * out[:, 0].reshape(N, self.m)

    def vjp(self, xi, t, x, i, cot) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        i = np.asarray(i, dtype=np.intp).reshape(-1)
        out, cache = self.arch.forward(xi, self._inputs(t, x, i))
        tau = self.horizon - np.broadcast_to(np.asarray(t, float), (len(x),))
        w = np.asarray(cot, dtype=float) * tau
        g = np.zeros_like(out)
        if self.heads:
            g[np.arange(len(out)), i] = w
        else:
            g[:, 0] = w
        return self.arch.backward(xi, cache, g)


class LinearValue:
    """v(t, x, i) = h(x) + (T - t) * (xi_0 + xi_1 x_0 + ...), regime-blind."""

    def __init__(self, state_dim: int, horizon: float, terminal, m: int):
        self.state_dim = state_dim
        self.horizon = float(horizon)
        self.terminal = terminal
        self.m = m

    @property
    def n_params(self) -> int:
        return 1 + self.state_dim

    def describe(self) -> dict:
        return {"kind": "linear", "state_dim": self.state_dim, "m": self.m}

    def init(self, rng) -> np.ndarray:
        return np.zeros(self.n_params)

    def features(self, t, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        tau = self.horizon - np.broadcast_to(np.asarray(t, float), (len(x),))
        return tau[:, None] * np.concatenate([np.ones((len(x), 1)), x], axis=1)

    def _check(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.n_params,):
            raise ArchitectureMismatchError(f"expected {self.n_params} parameters, got shape {xi.shape}")
        return xi

    def values(self, xi, t, x, i=None) -> np.ndarray:
        xi = self._check(xi)
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        return self.terminal(x) + self.features(t, x) @ xi

    def all_regimes(self, xi, t, x) -> np.ndarray:
        v = self.values(xi, t, x)
        return np.repeat(v[:, None], self.m, axis=1)

    def vjp(self, xi, t, x, i, cot) -> np.ndarray:
        self._check(xi)
        return self.features(t, x).T @ np.asarray(cot, dtype=float)


def built_in(name: str, m: int, state_dim: int, horizon: float, terminal, width: int = 128):
    """Approximators used by the experiments: 'regulator', 'put-options' or 'linear'."""
    if name == "linear":
        return LinearValue(state_dim, horizon, terminal, m)
    acts = {"regulator": ("relu", "tanh"), "put-options": ("tanh", "tanh")}.get(name)
    if acts is None:
        raise ArchitectureMismatchError(f"no built-in approximator named {name!r}")
    arch = Architecture(1 + state_dim + m, (width, width), acts, 1)
    return MLPValue(arch, m, state_dim, horizon, terminal)


def gradient_check(approx, xi, t, x, i, probes: int = 100, step: float = 1e-5, rng=None) -> float:
    """Max relative error between reverse mode and central differences over random coordinates.

    The scalar probed is sum(v) over the given points.
    """
    rng = rng or np.random.default_rng(0)
    grad = approx.vjp(xi, t, x, i, np.ones(len(np.atleast_1d(i))))
    coords = rng.choice(len(xi), size=min(probes, len(xi)), replace=False)
    worst = 0.0
    for c in coords:
        up, down = xi.copy(), xi.copy()
        up[c] += step
        down[c] -= step
        fd = (approx.values(up, t, x, i).sum() - approx.values(down, t, x, i).sum()) / (2 * step)
        scale = max(abs(fd), abs(grad[c]))
        if scale > 0:
            worst = max(worst, abs(fd - grad[c]) / scale)
    return worst
