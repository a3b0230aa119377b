"""Finite-difference solvers for the coupled regime system.

Backward Euler in time. The spatial generator uses central differences,
switching to upwinding on the drift where the cell Peclet number exceeds the
threshold. In one dimension all regimes are solved together in a single
banded system (unknowns interleaved node-major, bandwidth m). In two
dimensions each step is split: the mixed derivative is explicit, then one
implicit sweep along axis 0 carries the regime coupling and the sources,
then one implicit sweep along axis 1.

The exploratory system is nonlinear only through the exponential coupling;
each step resolves it by re-solving the linear system with the intensities
recomputed from the current iterate (Newton on the convex coupling term)
until the sup-norm change drops below ``tol``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import ModelValidationError, NonFiniteValueError, SubIterationError
from .grid import SpaceTimeGrid, ValueField
from .model import EXPONENT_CAP, SwitchingModel, bound_constant_K, optimal_generator, row_entropy, value_bound
from .policy import GeneratorPolicy

log = logging.getLogger(__name__)

BOUNDARIES = ("neumann", "bound")


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the reference solvers.

    ``boundary="neumann"`` imposes zero normal derivative on the box;
    ``boundary="bound"`` imposes the truncation value K (T - t) + h(x).
    Boundary nodes where the stencil never leaves the box (vanishing
    diffusion, inward or zero drift) keep the PDE row under either choice.
    """

    boundary: str = "neumann"
    tol: float = 1e-10
    max_sub_iterations: int = 50
    peclet_threshold: float = 2.0
    check_bound: bool = True
    bound_slack: float = 1e-6
    cap: float = EXPONENT_CAP

    def __post_init__(self):
        if self.boundary not in BOUNDARIES:
            raise ModelValidationError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")


# -- coefficients -------------------------------------------------------------


def _stencil(a, b, h, threshold):
    """Three-point generator weights for a u'' + b u' on spacing h."""
    with np.errstate(divide="ignore", invalid="ignore"):
        peclet = np.where(a > 0, np.abs(b) * h / np.where(a > 0, a, 1.0), np.inf)
    upwind = peclet > threshold
    d2 = a / h**2
    lo = np.where(upwind, d2 + np.maximum(-b, 0.0) / h, d2 - b / (2 * h))
    up = np.where(upwind, d2 + np.maximum(b, 0.0) / h, d2 + b / (2 * h))
    di = np.where(upwind, -2 * d2 - np.abs(b) / h, -2 * d2)
    return lo, di, up


class _Step:
    """Coefficients of the spatial operator at one time node, arrays shaped (m, *nodes)."""

    def __init__(self, model: SwitchingModel, grid: SpaceTimeGrid, k: int, opts: SolverOptions, pts=None):
        t = grid.t_nodes[k]
        pts = grid.points if pts is None else pts
        m, dim = model.m, grid.dim
        self.t = t
        self.lo, self.di, self.up = [], [], []
        f, mixed = [], []
        per_dim = [([], [], []) for _ in range(dim)]
        for i in range(m):
            mu = np.broadcast_to(model.drift(t, pts, i), pts.shape)
            sig = model.vol(t, pts, i)
            cov = sig @ np.swapaxes(sig, -1, -2)
            for d in range(dim):
                lo, di, up = _stencil(0.5 * cov[..., d, d], mu[..., d], grid.dx[d], opts.peclet_threshold)
                per_dim[d][0].append(lo)
                per_dim[d][1].append(di)
                per_dim[d][2].append(up)
            if dim == 2:
                mixed.append(cov[..., 0, 1])
            f.append(np.broadcast_to(model.running_reward(t, pts, i), grid.nodes))
        self.lo = [np.array(p[0]) for p in per_dim]
        self.di = [np.array(p[1]) for p in per_dim]
        self.up = [np.array(p[2]) for p in per_dim]
        self.f = np.array(f, dtype=float)
        self.mixed = np.array(mixed) if dim == 2 else None
        # boundary rows: True where the box condition replaces the PDE
        self.bc_lo, self.bc_hi = [], []
        for d in range(dim):
            first = _take(self.lo[d], d, 0)
            last = _take(self.up[d], d, -1)
            self.bc_lo.append(first != 0.0)
            self.bc_hi.append(last != 0.0)
        self.bc_value = None
        if opts.boundary == "bound":
            self.bc_value = bound_constant_K(model) * (model.horizon - t) + model.terminal_reward(pts)


def _take(arr, d, index):
    """Slice ``arr`` (m, *nodes) at ``index`` along spatial axis d."""
    return np.take(arr, index, axis=d + 1)


def _mixed_term(V, coef, dx):
    """coef * d2V/dx0dx1 with central differences on interior nodes; zero on the boundary."""
    out = np.zeros_like(V)
    out[:, 1:-1, 1:-1] = (V[:, 2:, 2:] - V[:, 2:, :-2] - V[:, :-2, 2:] + V[:, :-2, :-2]) / (4 * dx[0] * dx[1])
    return coef * out


def _policy_sources(gen: np.ndarray, model: SwitchingModel) -> np.ndarray:
    """Value-independent part of H_i: -sum_j pi_ij g_ij + lambda R; gen is (*nodes, m, m) -> (m, *nodes)."""
    m = model.m
    off = ~np.eye(m, dtype=bool)
    cost = -np.sum(np.where(off, gen * model.switch_cost, 0.0), axis=-1)
    ent = row_entropy(gen, np.arange(m))
    return np.moveaxis(cost + model.temperature * ent, -1, 0)


def _check_generator(gen, k):
    m = gen.shape[-1]
    off = gen[..., ~np.eye(m, dtype=bool)]
    if not np.all(np.isfinite(off)):
        raise NonFiniteValueError("policy rates", {"time_index": k})
    if np.any(off < 0):
        raise ModelValidationError(f"negative off-diagonal policy rate at time index {k}")


# -- line solves ---------------------------------------------------------------


def _to_lines(arr, d):
    """(m, *nodes) -> (lines, N_d, m) view order for sweeps along axis d."""
    a = np.moveaxis(arr, 0, -1)
    a = np.moveaxis(a, d, -2)
    return a.reshape(-1, a.shape[-2], a.shape[-1])


def _from_lines(lines, d, nodes, m):
    shape = list(nodes)
    shape.pop(d)
    a = lines.reshape(tuple(shape) + (nodes[d], m))
    a = np.moveaxis(a, -2, d)
    return np.moveaxis(a, -1, 0)


def _sweep(rhs, step: _Step, d, dt, opts, nodes, gen=None, frozen=None):
    """Solve (I - dt (L_d + C)) V = rhs along axis d, returning (m, *nodes).

    ``gen`` (*nodes, m, m) adds the regime coupling; ``frozen`` (*nodes) marks
    Dirichlet nodes that must keep their rhs value.
    """
    m = rhs.shape[0]
    lo = _to_lines(step.lo[d], d)
    di = _to_lines(step.di[d], d)
    up = _to_lines(step.up[d], d)
    b = _to_lines(rhs, d).copy()
    n_lines, n, _ = lo.shape
    size = n_lines * n * m

    diags = {o: np.zeros((n_lines, n, m)) for o in range(-m, m + 1)}
    diags[0] = 1.0 - dt * di
    diags[-m] = -dt * lo
    diags[m] = -dt * up
    if gen is not None:
        g = np.moveaxis(gen, d, -3).reshape(n_lines, n, m, m)
        for i in range(m):
            diags[0][..., i] -= dt * g[..., i, i]
            for j in range(m):
                if j != i:
                    diags[j - i][..., i] -= dt * g[..., i, j]

    bc_lo = _to_lines(_expand_edge(step.bc_lo[d], d, nodes), d)
    bc_hi = _to_lines(_expand_edge(step.bc_hi[d], d, nodes), d)
    rows_lo = bc_lo[:, 0, :]
    rows_hi = bc_hi[:, -1, :]
    for o in diags:
        diags[o][:, 0, :][rows_lo] = 0.0
        diags[o][:, -1, :][rows_hi] = 0.0
    diags[0][:, 0, :][rows_lo] = 1.0
    diags[0][:, -1, :][rows_hi] = 1.0
    if opts.boundary == "neumann":
        diags[m][:, 0, :][rows_lo] = -1.0
        diags[-m][:, -1, :][rows_hi] = -1.0
        b[:, 0, :][rows_lo] = 0.0
        b[:, -1, :][rows_hi] = 0.0
    else:
        bcv = np.broadcast_to(step.bc_value, nodes)
        bcl = _to_lines(np.broadcast_to(bcv, (m,) + nodes), d)
        b[:, 0, :][rows_lo] = bcl[:, 0, :][rows_lo]
        b[:, -1, :][rows_hi] = bcl[:, -1, :][rows_hi]
    # stencils never cross line ends
    diags[-m][:, 0, :] = 0.0
    diags[m][:, -1, :] = 0.0
    if frozen is not None:
        fr = _to_lines(np.broadcast_to(frozen, (m,) + nodes), d)
        for o in diags:
            diags[o][fr] = 0.0
        diags[0][fr] = 1.0

    ab = np.zeros((2 * m + 1, size))
    for o, vals in diags.items():
        flat = vals.reshape(-1)
        if o >= 0:
            ab[m - o, o:] = flat[: size - o]
        else:
            ab[m - o, : size + o] = flat[-o:]
    x = solve_banded((m, m), ab, b.reshape(-1), overwrite_ab=True, overwrite_b=True, check_finite=False)
    return _from_lines(x.reshape(n_lines, n, m), d, nodes, m)


def _expand_edge(mask_edge, d, nodes):
    """Lift an edge mask (m, *nodes without axis d) into a full (m, *nodes) mask at both edges."""
    m = mask_edge.shape[0]
    full = np.zeros((m,) + tuple(nodes), dtype=bool)
    idx_first = [slice(None)] * (len(nodes) + 1)
    idx_last = [slice(None)] * (len(nodes) + 1)
    idx_first[d + 1] = 0
    idx_last[d + 1] = -1
    full[tuple(idx_first)] = mask_edge
    full[tuple(idx_last)] = mask_edge
    return full


# -- public solvers -----------------------------------------------------------------


def _bound_frozen(step: _Step, grid: SpaceTimeGrid, opts: SolverOptions):
    if opts.boundary != "bound" or grid.dim == 1:
        return None
    return ~grid.interior_mask(1)


def _advance(V_next, step, grid, model, opts, k, gen=None, optimal=False):
    """One backward step from t_{k+1} to t_k."""
    dt = grid.dt
    rhs_base = V_next + dt * step.f
    if step.mixed is not None:
        rhs_base = rhs_base + dt * _mixed_term(V_next, step.mixed, grid.dx)
    frozen = _bound_frozen(step, grid, opts)
    if frozen is not None:
        rhs_base = np.where(frozen, step.bc_value, rhs_base)

    if not optimal:
        _check_generator(gen, k)
        rhs = rhs_base + dt * _policy_sources(gen, model)
        U = _sweep(rhs, step, 0, dt, opts, grid.nodes, gen=gen, frozen=frozen)
        sweeps = 1
    else:
        U = V_next
        change = np.inf
        for sweeps in range(1, opts.max_sub_iterations + 1):
            gen = optimal_generator(np.moveaxis(U, 0, -1), model.switch_cost, model.temperature, opts.cap)
            rhs = rhs_base + dt * _policy_sources(gen, model)
            U_new = _sweep(rhs, step, 0, dt, opts, grid.nodes, gen=gen, frozen=frozen)
            _check_finite(U_new, k)
            change = float(np.max(np.abs(U_new - U)))
            U = U_new
            if change < opts.tol:
                break
        else:
            raise SubIterationError(k, change, opts.max_sub_iterations)
    _check_finite(U, k)
    if grid.dim == 2:
        U = _sweep(U, step, 1, dt, opts, grid.nodes, frozen=frozen)
        _check_finite(U, k)
    return U, sweeps


def _check_finite(V, k):
    if not np.all(np.isfinite(V)):
        bad = np.argwhere(~np.isfinite(V))[0]
        raise NonFiniteValueError("value field", {"time_index": k, "regime": int(bad[0]), "node": tuple(int(b) for b in bad[1:])})


def _terminal(model, grid):
    h = np.asarray(model.terminal_reward(grid.points), dtype=float)
    return np.broadcast_to(h, (model.m,) + grid.nodes)


def _solve(model, grid, opts, policy=None):
    if grid.dim != model.state_dim:
        raise ModelValidationError(f"grid dimension {grid.dim} != model state_dim {model.state_dim}")
    started = time.perf_counter()
    K = grid.n_steps
    values = np.empty((model.m, K + 1) + grid.nodes)
    values[:, K] = _terminal(model, grid)
    pts = grid.points
    sweeps = np.zeros(K, dtype=int)
    for k in range(K - 1, -1, -1):
        step = _Step(model, grid, k, opts, pts)
        gen = None if policy is None else policy.at_nodes(grid, k)
        values[:, k], sweeps[k] = _advance(values[:, k + 1], step, grid, model, opts, k, gen, optimal=policy is None)
    meta = {
        "solver": "exploratory" if policy is None else "fixed-policy",
        "boundary": opts.boundary,
        "max_sub_iterations": int(sweeps.max()),
        "mean_sub_iterations": float(sweeps.mean()),
        "seconds": time.perf_counter() - started,
    }
    return ValueField(values, grid, meta)


def solve_fixed_policy(
    model: SwitchingModel,
    policy: GeneratorPolicy,
    grid: SpaceTimeGrid,
    options: SolverOptions | None = None,
) -> ValueField:
    """Value of a fixed feedback policy: the linear coupled system with Hamiltonian H_i(pi, V)."""
    opts = options or SolverOptions()
    return _solve(model, grid, opts, policy)


def solve_exploratory_hjb(
    model: SwitchingModel,
    grid: SpaceTimeGrid,
    options: SolverOptions | None = None,
) -> ValueField:
    """Optimal exploratory value: coupling lambda * sum_j exp((V_j - g_ij - V_i) / lambda)."""
    opts = options or SolverOptions()
    field = _solve(model, grid, opts)
    if opts.check_bound:
        check_a_priori_bound(field, model, opts.bound_slack)
    return field


def check_a_priori_bound(field: ValueField, model: SwitchingModel, slack: float = 1e-6) -> float:
    """Largest excess of |V| over K (T - t) + K_{f,h}; raises if above ``slack``."""
    bound = value_bound(model, field.grid.t_nodes)
    shape = (1, -1) + (1,) * field.grid.dim
    excess = float(np.max(np.abs(field.values) - bound.reshape(shape)))
    if excess > slack:
        raise ModelValidationError(
            f"value field exceeds the a-priori bound by {excess:.3e}; check the declared reward_bound"
        )
    return excess


# -- residuals ------------------------------------------------------------------


def terminal_residual(field: ValueField, model: SwitchingModel) -> float:
    return float(np.max(np.abs(field.values[:, -1] - _terminal(model, field.grid))))


def _apply_generator(V, step: _Step, d):
    """(L_d V) with the three-point weights; edge terms reaching outside are dropped."""
    lo, di, up = step.lo[d], step.di[d], step.up[d]
    out = di * V
    ax = d + 1
    n = V.shape[ax]
    inner = [slice(None)] * V.ndim
    prev = [slice(None)] * V.ndim
    nxt = [slice(None)] * V.ndim
    inner[ax], prev[ax] = slice(1, n), slice(0, n - 1)
    out[tuple(inner)] += lo[tuple(inner)] * V[tuple(prev)]
    inner[ax], nxt[ax] = slice(0, n - 1), slice(1, n)
    out[tuple(inner)] += up[tuple(inner)] * V[tuple(nxt)]
    return out


def node_residuals(field: ValueField, model: SwitchingModel, k: int, policy: GeneratorPolicy | None = None,
                   options: SolverOptions | None = None) -> np.ndarray:
    """Residual of the (unsplit) discrete equation at every node of step k: shape (m, *nodes).

    With ``policy=None`` the optimal coupling is used.
    """
    opts = options or SolverOptions()
    grid = field.grid
    step = _Step(model, grid, k, opts, grid.points)
    V, V_next = field.values[:, k], field.values[:, k + 1]
    if policy is None:
        gen = optimal_generator(np.moveaxis(V, 0, -1), model.switch_cost, model.temperature, opts.cap)
    else:
        gen = policy.at_nodes(grid, k)
    LV = sum(_apply_generator(V, step, d) for d in range(grid.dim))
    if step.mixed is not None:
        LV = LV + _mixed_term(V, step.mixed, grid.dx)
    coupling = np.moveaxis(np.sum(gen * np.moveaxis(V, 0, -1)[..., None, :], axis=-1), -1, 0)
    r = V - V_next - grid.dt * (LV + step.f + coupling + _policy_sources(gen, model))
    for d in range(grid.dim):
        for edge, mask in ((0, step.bc_lo[d]), (-1, step.bc_hi[d])):
            sl = [slice(None)] * V.ndim
            sl[d + 1] = edge
            nb = [slice(None)] * V.ndim
            nb[d + 1] = 1 if edge == 0 else -2
            if opts.boundary == "neumann":
                bc = V[tuple(sl)] - V[tuple(nb)]
            else:
                bcv = np.broadcast_to(step.bc_value, grid.nodes)
                bc = V[tuple(sl)] - np.take(bcv, edge, axis=d)[None]
            region = r[tuple(sl)]
            region[mask] = bc[mask]
            r[tuple(sl)] = region
    return r


def step_residuals(field: ValueField, model: SwitchingModel, policy: GeneratorPolicy | None = None,
                   options: SolverOptions | None = None) -> np.ndarray:
    """Sup-norm residual of the discrete equations at each step k = 0..K-1."""
    return np.array([float(np.max(np.abs(node_residuals(field, model, k, policy, options))))
                     for k in range(field.grid.n_steps)])


def residual_norm(field: ValueField, model: SwitchingModel, policy: GeneratorPolicy | None = None,
                  options: SolverOptions | None = None) -> float:
    """Largest residual of the discrete system including the terminal constraint."""
    steps = step_residuals(field, model, policy, options)
    return max(terminal_residual(field, model), float(steps.max()) if steps.size else 0.0)


# -- diagnostics ------------------------------------------------------------------


def box_doubling_check(model: SwitchingModel, grid: SpaceTimeGrid, options: SolverOptions | None = None,
                       keep_fraction: float = 0.5) -> float:
    """Sup change of the exploratory solution on the central part of the box when the box is doubled."""
    opts = options or SolverOptions()
    small = solve_exploratory_hjb(model, grid, opts)
    wide_grid = grid.widened(2.0)
    wide = solve_exploratory_hjb(model, wide_grid, opts)
    pts = grid.points
    centre = np.array([(lo + hi) / 2 for lo, hi in zip(grid.lower, grid.upper)])
    half = np.array([(hi - lo) / 2 for lo, hi in zip(grid.lower, grid.upper)]) * keep_fraction
    inside = np.all(np.abs(pts - centre) <= half + 1e-12, axis=-1)
    worst = 0.0
    for k in range(grid.n_steps + 1):
        a = small.values[:, k][:, inside]
        b = wide.interpolate(grid.t_nodes[k], pts[inside])
        worst = max(worst, float(np.max(np.abs(a - b.T))))
    return worst
