"""Feedback generator policies pi_ij(t, x)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ModelValidationError
from .grid import SpaceTimeGrid, ValueField
from .model import EXPONENT_CAP, SwitchingModel, optimal_generator


class GeneratorPolicy:
    """Transition intensities as a table over grid nodes, or derived from a value field.

    Every accessor returns full generator matrices in the trailing two axes,
    diagonal equal to minus the off-diagonal row sum.
    """

    def __init__(self, *, table=None, grid=None, field=None, model=None, fn=None, cap=EXPONENT_CAP):
        self._table = table
        self._grid = grid
        self.field = field
        self.model = model
        self._fn = fn
        self.cap = cap

    @classmethod
    def tabulated(cls, rates: np.ndarray, grid: SpaceTimeGrid) -> "GeneratorPolicy":
        """``rates`` has shape (K+1, *nodes, m, m); diagonals are recomputed."""
        rates = np.array(rates, dtype=float)
        m = rates.shape[-1]
        if rates.shape[:-2] != (grid.n_steps + 1,) + grid.nodes or rates.shape[-2] != m:
            raise ModelValidationError(f"rate table shape {rates.shape} does not match grid")
        eye = np.eye(m, dtype=bool)
        off = np.where(eye, 0.0, rates)
        if np.any(off < 0) or not np.all(np.isfinite(off)):
            raise ModelValidationError("tabulated off-diagonal rates must be finite and nonnegative")
        rates = off
        rates[..., eye] = -off.sum(axis=-1)
        return cls(table=rates, grid=grid)

    @classmethod
    def from_field(cls, field: ValueField, model: SwitchingModel, cap: float = EXPONENT_CAP) -> "GeneratorPolicy":
        return cls(field=field, model=model, cap=cap)

    @classmethod
    def from_callable(cls, fn: Callable[[float, np.ndarray], np.ndarray]) -> "GeneratorPolicy":
        return cls(fn=fn)

    @classmethod
    def zero(cls, m: int) -> "GeneratorPolicy":
        return cls(fn=lambda t, x: np.zeros(np.shape(x)[:-1] + (m, m)))

    @classmethod
    def constant(cls, rates) -> "GeneratorPolicy":
        rates = np.array(rates, dtype=float)
        m = rates.shape[0]
        eye = np.eye(m, dtype=bool)
        rates[eye] = 0.0
        rates[eye] = -rates.sum(axis=1)
        return cls(fn=lambda t, x: np.broadcast_to(rates, np.shape(x)[:-1] + (m, m)).copy())

    @property
    def is_derived(self) -> bool:
        return self.field is not None

    def at_nodes(self, grid: SpaceTimeGrid, k: int) -> np.ndarray:
        """Generators at every spatial node of ``grid`` at time index ``k``: (*nodes, m, m)."""
        if self.field is not None and self.field.grid == grid:
            vals = np.moveaxis(self.field.values[:, k], 0, -1)
            return optimal_generator(vals, self.model.switch_cost, self.model.temperature, self.cap)
        if self._table is not None and self._grid == grid:
            return self._table[k]
        return self.generator(grid.t_nodes[k], grid.points)

    def generator(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.field is not None:
            vals = self.field.interpolate(t, x)
            return optimal_generator(vals, self.model.switch_cost, self.model.temperature, self.cap)
        if self._table is not None:
            return self._interp_table(t, x)
        return np.asarray(self._fn(t, x), dtype=float)

    def rows(self, t: float, x, i) -> np.ndarray:
        """Rows for the current regimes ``i`` (broadcast over x's leading axes): (..., m)."""
        gen = self.generator(t, x)
        i = np.broadcast_to(np.asarray(i), gen.shape[:-2])
        return np.take_along_axis(gen, i[..., None, None], axis=-2)[..., 0, :]

    def _interp_table(self, t, x):
        g = self._grid
        m = self._table.shape[-1]
        flat = np.moveaxis(self._table.reshape(self._table.shape[0], -1, m * m), -1, 1)
        flat = flat.reshape((g.n_steps + 1, m * m) + g.nodes)
        field = ValueField(np.moveaxis(flat, 1, 0), g)
        out = field.interpolate(t, x)
        return out.reshape(out.shape[:-1] + (m, m))
