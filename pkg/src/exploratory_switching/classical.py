"""Classical switching reference: the obstacle system, solved by projection.

Each backward step diffuses every regime on its own (implicit), then projects
V_i <- max(V_i, max_{j != i} (V_j - g_ij)) until the tuple stops moving.
Nothing here touches the exponential coupling, so comparisons against the
exploratory solver use two independent code paths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelValidationError, ProjectionError
from .grid import SpaceTimeGrid, ValueField
from .model import SwitchingModel
from .pde import SolverOptions, _Step, _check_finite, _mixed_term, _bound_frozen, _sweep, _terminal, solve_exploratory_hjb

PROJECTION_TOL = 1e-12
INTERIOR_LAYERS = 2


def project(V: np.ndarray, switch_cost: np.ndarray, max_sweeps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Obstacle projection of V (m, ...); returns the projected tuple and the mask of moved entries."""
    m = V.shape[0]
    max_sweeps = m if max_sweeps is None else max_sweeps
    moved = np.zeros(V.shape, dtype=bool)
    g = switch_cost.reshape((m, m) + (1,) * (V.ndim - 1))
    for _ in range(max_sweeps):
        # obstacle[i] = max_{j != i} V_j - g_ij
        cand = V[None, :] - g
        cand[np.arange(m), np.arange(m)] = -np.inf
        obstacle = cand.max(axis=1)
        new = np.maximum(V, obstacle)
        lifted = new - V
        moved |= lifted > 0
        V = new
        if float(np.max(lifted)) < PROJECTION_TOL:
            return V, moved
    raise ProjectionError(f"obstacle projection still moving after {max_sweeps} sweeps")


def solve_variational_inequality(
    model: SwitchingModel,
    grid: SpaceTimeGrid,
    options: SolverOptions | None = None,
) -> ValueField:
    """Backward projection scheme for the classical switching value (temperature unused)."""
    if model.m < 2:
        raise ModelValidationError("switching needs at least two regimes")
    if grid.dim != model.state_dim:
        raise ModelValidationError(f"grid dimension {grid.dim} != model state_dim {model.state_dim}")
    opts = options or SolverOptions()
    K = grid.n_steps
    values = np.empty((model.m, K + 1) + grid.nodes)
    values[:, K] = _terminal(model, grid)
    pts = grid.points
    projected = 0
    dt = grid.dt
    for k in range(K - 1, -1, -1):
        step = _Step(model, grid, k, opts, pts)
        V_next = values[:, k + 1]
        rhs = V_next + dt * step.f
        if step.mixed is not None:
            rhs = rhs + dt * _mixed_term(V_next, step.mixed, grid.dx)
        frozen = _bound_frozen(step, grid, opts)
        if frozen is not None:
            rhs = np.where(frozen, step.bc_value, rhs)
        U = _sweep(rhs, step, 0, dt, opts, grid.nodes, frozen=frozen)
        if grid.dim == 2:
            U = _sweep(U, step, 1, dt, opts, grid.nodes, frozen=frozen)
        _check_finite(U, k)
        U, moved = project(U, model.switch_cost)
        projected += int(moved.sum())
        values[:, k] = U
    return ValueField(values, grid, {"solver": "variational-inequality", "projected_nodes": projected})


def obstacle_slack(field: ValueField, switch_cost: np.ndarray) -> np.ndarray:
    """V_i - max_{j != i}(V_j - g_ij) at every node; nonnegative for a projected field."""
    V = field.values
    m = V.shape[0]
    g = switch_cost.reshape((m, m) + (1,) * (V.ndim - 1))
    cand = V[None, :] - g
    cand[np.arange(m), np.arange(m)] = -np.inf
    return V - cand.max(axis=1)


@dataclass
class SweepRow:
    temperature: float
    sup_distance: float


def lambda_sweep(
    model: SwitchingModel,
    grid: SpaceTimeGrid,
    lambdas,
    options: SolverOptions | None = None,
    reference: ValueField | None = None,
) -> list[SweepRow]:
    """Interior sup-distance between the exploratory solution and the obstacle solution per temperature."""
    lambdas = [float(v) for v in lambdas]
    if not lambdas or any(v <= 0 for v in lambdas):
        raise ModelValidationError("temperatures must be strictly positive")
    if any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise ModelValidationError("temperatures must be strictly decreasing")
    vi = reference if reference is not None else solve_variational_inequality(model, grid, options)
    rows = []
    for lam in lambdas:
        field = solve_exploratory_hjb(model.with_temperature(lam), grid, options)
        rows.append(SweepRow(lam, field.sup_distance(vi, INTERIOR_LAYERS)))
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "sup_distance"])
        for r in rows:
            w.writerow([repr(r.temperature), repr(r.sup_distance)])
    return path
