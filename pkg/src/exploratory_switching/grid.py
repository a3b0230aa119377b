"""Space-time meshes and value fields sampled on them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelValidationError

FIELD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform time mesh on [0, T] times a uniform box mesh in one or two dimensions."""

    horizon: float
    n_steps: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        nodes = tuple(int(v) for v in np.atleast_1d(self.nodes))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)
        if not (len(lower) == len(upper) == len(nodes)):
            raise ModelValidationError("lower, upper and nodes must have equal length")
        if not 1 <= len(nodes) <= 2:
            raise ModelValidationError("only 1 or 2 spatial dimensions are supported")
        if self.n_steps < 1 or self.horizon <= 0:
            raise ModelValidationError("need n_steps >= 1 and horizon > 0")
        if any(n < 3 for n in nodes) or any(hi <= lo for lo, hi in zip(lower, upper)):
            raise ModelValidationError("each axis needs >= 3 nodes and lower < upper")

    @classmethod
    def uniform(cls, horizon, n_steps, lower, upper, nodes) -> "SpaceTimeGrid":
        return cls(float(horizon), int(n_steps), lower, upper, nodes)

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def t_nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @property
    def points(self) -> np.ndarray:
        """All spatial nodes, shape (*nodes, dim)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def interior_mask(self, layers: int = 0) -> np.ndarray:
        """Boolean mask of spatial nodes at least ``layers`` nodes from the boundary."""
        mask = np.ones(self.nodes, dtype=bool)
        for d, n in enumerate(self.nodes):
            idx = np.arange(n)
            keep = (idx >= layers) & (idx < n - layers)
            shape = [1] * self.dim
            shape[d] = n
            mask &= keep.reshape(shape)
        return mask

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        return SpaceTimeGrid(
            self.horizon,
            self.n_steps * factor,
            self.lower,
            self.upper,
            tuple((n - 1) * factor + 1 for n in self.nodes),
        )

    def widened(self, factor: float = 2.0) -> "SpaceTimeGrid":
        """Box scaled about its centre by ``factor`` at the same spacing."""
        lower, upper, nodes = [], [], []
        for lo, hi, n, h in zip(self.lower, self.upper, self.nodes, self.dx):
            c, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * factor
            cells = int(round(2 * half / h))
            lower.append(c - half)
            upper.append(c + half)
            nodes.append(cells + 1)
        return SpaceTimeGrid(self.horizon, self.n_steps, tuple(lower), tuple(upper), tuple(nodes))

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_steps": self.n_steps,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "nodes": list(self.nodes),
        }


@dataclass(frozen=True, eq=False)
class ValueField:
    """Value functions of all regimes: ``values[i, k, ...]`` = V_i(t_k, x)."""

    values: np.ndarray
    grid: SpaceTimeGrid
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        expected = (self.values.shape[0], self.grid.n_steps + 1) + self.grid.nodes
        if self.values.ndim != 2 + self.grid.dim or self.values.shape != expected:
            raise ModelValidationError(f"values shape {self.values.shape} does not match grid {expected}")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def slice(self, k: int) -> np.ndarray:
        return self.values[:, k]

    def interpolate(self, t: float, x) -> np.ndarray:
        """Values of every regime at time ``t`` and points ``x`` (..., dim); returns (..., m).

        Linear in time, (bi)linear in space; points outside the box are clamped.
        """
        grid = self.grid
        s = min(max(t / grid.dt, 0.0), grid.n_steps)
        k0 = min(int(np.floor(s)), grid.n_steps - 1)
        w = s - k0
        a = _interp_space(self.values[:, k0], grid, x)
        if w == 0.0:
            return a
        b = _interp_space(self.values[:, k0 + 1], grid, x)
        return (1.0 - w) * a + w * b

    def interpolate_regime(self, t: float, x, i) -> np.ndarray:
        vals = self.interpolate(t, x)
        i = np.broadcast_to(np.asarray(i), vals.shape[:-1])
        return np.take_along_axis(vals, i[..., None], axis=-1)[..., 0]

    def sup_distance(self, other: "ValueField", layers: int = 0) -> float:
        mask = self.grid.interior_mask(layers)
        diff = np.abs(self.values - other.values)[..., mask]
        return float(diff.max())

    # -- serialization --------------------------------------------------

    def save(self, path, model_hash: str | None = None, encoding: str = "binary") -> Path:
        """Write ``<path>.json`` header plus ``<path>.bin`` or ``<path>.csv`` data."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if encoding == "binary":
            data = path.with_suffix(".bin")
            np.ascontiguousarray(self.values, dtype="<f8").tofile(data)
        elif encoding == "csv":
            data = path.with_suffix(".csv")
            self._write_csv(data)
        else:
            raise ValueError(f"unknown encoding {encoding!r}")
        header = {
            "format": "value-field",
            "version": FIELD_FORMAT_VERSION,
            "encoding": encoding,
            "data_file": data.name,
            "m": self.m,
            "grid": self.grid.to_dict(),
            "model_hash": model_hash,
        }
        head = path.with_suffix(".json")
        head.write_text(json.dumps(header, indent=2))
        return head

    def _write_csv(self, target: Path) -> None:
        grid = self.grid
        pts = grid.points.reshape(-1, grid.dim)
        coords = [f"x{d}" for d in range(grid.dim)]
        with target.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *coords, "regime", "value"])
            for i in range(self.m):
                for k, t in enumerate(grid.t_nodes):
                    vals = self.values[i, k].reshape(-1)
                    for p, v in zip(pts, vals):
                        w.writerow([repr(float(t)), *(repr(float(c)) for c in p), i, repr(float(v))])

    @classmethod
    def load(cls, path) -> tuple["ValueField", dict]:
        head = Path(path).with_suffix(".json")
        header = json.loads(head.read_text())
        if header.get("format") != "value-field" or header.get("version") != FIELD_FORMAT_VERSION:
            raise ModelValidationError(f"{head} is not a version-{FIELD_FORMAT_VERSION} value-field header")
        g = header["grid"]
        grid = SpaceTimeGrid(g["horizon"], g["n_steps"], tuple(g["lower"]), tuple(g["upper"]), tuple(g["nodes"]))
        shape = (header["m"], grid.n_steps + 1) + grid.nodes
        data = head.with_name(header["data_file"])
        if header["encoding"] == "binary":
            values = np.fromfile(data, dtype="<f8").reshape(shape)
        else:
            raw = np.loadtxt(data, delimiter=",", skiprows=1)
            values = raw[:, -1].reshape(shape)
        return cls(values, grid), header


def _interp_space(slab: np.ndarray, grid: SpaceTimeGrid, x) -> np.ndarray:
    """Interpolate ``slab`` of shape (m, *nodes) at points x (..., dim) -> (..., m)."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    flat = x.reshape(-1, grid.dim)
    idx, wts = [], []
    for d, (lo, h, n) in enumerate(zip(grid.lower, grid.dx, grid.nodes)):
        s = np.clip((flat[:, d] - lo) / h, 0.0, n - 1)
        i0 = np.minimum(np.floor(s).astype(np.intp), n - 2)
        idx.append(i0)
        wts.append(s - i0)
    if grid.dim == 1:
        (i0,), (w,) = idx, wts
        out = slab[:, i0] * (1.0 - w) + slab[:, i0 + 1] * w
    else:
        (i0, j0), (u, v) = idx, wts
        out = (
            slab[:, i0, j0] * (1 - u) * (1 - v)
            + slab[:, i0 + 1, j0] * u * (1 - v)
            + slab[:, i0, j0 + 1] * (1 - u) * v
            + slab[:, i0 + 1, j0 + 1] * u * v
        )
    return out.T.reshape(lead + (slab.shape[0],))
