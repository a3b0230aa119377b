"""Command line entry point: ``exploratory-switching solve|train|verify``.

Settings come from built-in defaults, then an optional JSON config file, then
flags, each layer overriding the previous one.  Every run writes into a fresh
directory that only appears once the run has finished, together with a
manifest describing how to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Literal

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__, families
from .acceptance import CRITERIA, Suite
from .classical import lambda_sweep, solve_variational_inequality, write_sweep_csv
from .errors import SwitchingError, TrainingDivergedError
from .grid import SpaceTimeGrid
from .iteration import iterate
from .pde import solve_exploratory_hjb
from .rl import built_in, checkpoint, policy_from_params, train, uniform_start
from .rl.learner import SCHEDULES, TrainConfig, config_dict
from .simulator import SimConfig

log = logging.getLogger("exploratory_switching")

OUT_ENV = "EXPLORATORY_SWITCHING_OUT"

# box, default PDE grid (nodes per axis, time steps), slice range, training steps K and start box
FAMILY_DEFAULTS = {
    "regulator": dict(lower=[-3.0], upper=[3.0], nodes=[601], steps=2000, slice=(-2.5, 2.5),
                      n_steps=100, start=([-2.5], [2.5])),
    "put-options": dict(lower=[0.0, 0.0], upper=[3.0, 3.0], nodes=[201, 201], steps=200, slice=(0.5, 1.5),
                        n_steps=50, start=([0.5, 0.5], [1.5, 1.5])),
    "linear-toy": dict(lower=[-3.0], upper=[3.0], nodes=[301], steps=500, slice=(-2.0, 2.0),
                       n_steps=10, start=([-1.0], [1.0])),
}
TRAIN_DEFAULTS = {
    "regulator": dict(episodes=1000, batch=64, rate=1e-3, schedule="adam"),
    "put-options": dict(episodes=1000, batch=512, rate=1e-4, schedule="adam"),
    "linear-toy": dict(episodes=3000, batch=1, rate=0.05, schedule="constant"),
}
NETWORKS = {"regulator": "regulator", "put-options": "put-options", "linear-toy": "linear"}


class ConfigError(Exception):
    pass


class GridSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    nodes: list[int] | None = None
    steps: int | None = Field(default=None, gt=0)
    lower: list[float] | None = None
    upper: list[float] | None = None


class TrainSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    episodes: int | None = Field(default=None, ge=0)
    batch: int | None = Field(default=None, gt=0)
    rate: float | None = Field(default=None, gt=0)
    schedule: Literal["constant", "adam", "robbins-monro"] | None = None
    mode: Literal["offline", "online"] = "offline"
    A: float = 1.0
    B: float = 1.0
    nu: float = 1.0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    family: Literal["regulator", "put-options", "linear-toy", "custom-json"] = "regulator"
    model_file: Path | None = None
    temperature: float | None = Field(default=None, alias="lambda", gt=0)
    lambda_sweep: list[float] | None = None
    grid: GridSpec = GridSpec()
    train: TrainSpec = TrainSpec()
    seed: int = 0
    out: Path | None = None
    criteria: list[int] | None = None
    coarsen: int = Field(default=1, ge=1)

    @field_validator("model_file")
    @classmethod
    def _exists(cls, v):
        if v is not None and not v.is_file():
            raise ValueError(f"file {v} does not exist")
        return v

    @field_validator("criteria")
    @classmethod
    def _known(cls, v):
        if v is not None and any(n not in CRITERIA for n in v):
            raise ValueError(f"criteria must be drawn from {sorted(CRITERIA)}")
        return v

    @model_validator(mode="after")
    def _custom_needs_file(self):
        if self.family == "custom-json" and self.model_file is None:
            raise ValueError("family custom-json needs model_file")
        return self

    def model(self):
        if self.family == "custom-json":
            m = families.load_descriptor(self.model_file)
            return m.with_temperature(self.temperature) if self.temperature else m
        return families.build(self.family, **({"lambda": self.temperature} if self.temperature else {}))

    def base_family(self, model) -> str:
        if self.family != "custom-json":
            return self.family
        return (model.descriptor or {}).get("model", "regulator")

    def space_time_grid(self, model) -> SpaceTimeGrid:
        d = FAMILY_DEFAULTS[self.base_family(model)]
        g = self.grid
        return SpaceTimeGrid(
            model.horizon,
            g.steps or d["steps"],
            tuple(g.lower or d["lower"]),
            tuple(g.upper or d["upper"]),
            tuple(g.nodes or d["nodes"]),
        )


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_grid(text: str) -> dict:
    """'601x2000' (nodes x steps) or '201,201x200' for two axes."""
    try:
        nodes, steps = text.lower().split("x")
        return {"nodes": [int(v) for v in nodes.split(",")], "steps": int(steps)}
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like 601x2000, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exploratory-switching", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    common.add_argument("--family", choices=["regulator", "put-options", "linear-toy", "custom-json"])
    common.add_argument("--model-file", type=Path, help="model descriptor for --family custom-json")
    common.add_argument("--lambda", dest="temperature", type=float)
    common.add_argument("--grid", type=_parse_grid, help="nodes x steps, e.g. 601x2000 or 201,201x200")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("solve", parents=[common], help="PDE solve, policy iteration and optional sweep")
    s.add_argument("--lambda-sweep", type=_parse_floats, help="comma-separated decreasing temperatures")

    t = sub.add_parser("train", parents=[common], help="train a value network on the simulator")
    t.add_argument("--episodes", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--rate", type=float)
    t.add_argument("--mode", choices=["offline", "online"])
    t.add_argument("--schedule", choices=SCHEDULES)

    v = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    v.add_argument("--criteria", type=lambda s: [int(x) for x in s.split(",")], help="e.g. 1,2,3")
    v.add_argument("--coarsen", type=int, help="divide reference resolutions by this factor")
    return p


def _flag_layer(args) -> dict:
    layer = {}
    for key in ("family", "model_file", "seed", "out", "criteria", "coarsen", "lambda_sweep"):
        val = getattr(args, key, None)
        if val is not None:
            layer[key] = val
    if args.temperature is not None:
        layer["lambda"] = args.temperature
    if args.grid is not None:
        layer["grid"] = args.grid
    tr = {k: getattr(args, k, None) for k in ("episodes", "batch", "rate", "mode", "schedule")}
    tr = {k: v for k, v in tr.items() if v is not None}
    if tr:
        layer["train"] = tr
    return layer


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> ExperimentConfig:
    data: dict = {}
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
    data = _merge(data, _flag_layer(args))
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n" + "\n".join(lines)) from exc
    if cfg.out is None:
        cfg.out = Path(os.environ.get(OUT_ENV, "runs"))
    return cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Staging directory renamed to its final name only on success."""

    def __init__(self, root: Path, name: str):
        self.root = Path(root)
        self.name = name
        self.final: Path | None = None

    def __enter__(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.name}-", dir=self.root))
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        target = self.root / self.name
        n = 1
        while target.exists():
            target = self.root / f"{self.name}-{n}"
            n += 1
        self.stage.rename(target)
        self.final = target
        return False


def write_manifest(run: Path, command: str, cfg: ExperimentConfig, model, extra: dict | None = None) -> Path:
    files = {p.name: _sha256(p) for p in sorted(run.iterdir()) if p.is_file() and p.name != "manifest.json"}
    doc = {
        "command": command,
        "config": json.loads(cfg.model_dump_json(by_alias=True)),
        "seed": cfg.seed,
        "model_hash": families.model_hash(model) if model is not None else None,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "files": files,
    }
    doc.update(extra or {})
    path = run / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- solve -------------------------------------------------------------------


def cmd_solve(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    grid = cfg.space_time_grid(model)
    mhash = families.model_hash(model)
    rd = RunDir(cfg.out, f"solve-{cfg.family}-lambda{model.temperature:g}")
    with rd as run:
        log.info("direct solve on %s nodes x %d steps", grid.nodes, grid.n_steps)
        field = solve_exploratory_hjb(model, grid)
        field.save(run / "value", model_hash=mhash)
        _write_value_slices(run / "value_slices.csv", field)
        _, _, report = iterate(model, grid, max_iters=12, tol=1e-8, reference=field)
        report.to_csv(run / "iteration.csv")
        extra = {"iterations": report.iterations, "converged": report.converged}
        if cfg.lambda_sweep:
            vi = solve_variational_inequality(model, grid)
            vi.save(run / "value_vi", model_hash=mhash)
            rows = lambda_sweep(model, grid, cfg.lambda_sweep, reference=vi)
            write_sweep_csv(rows, run / "lambda_sweep.csv")
            extra["lambda_sweep"] = [[r.temperature, r.sup_distance] for r in rows]
        write_manifest(run, "solve", cfg, model, extra)
    print(f"wrote {rd.final}")
    return 0


def _write_value_slices(path: Path, field) -> None:
    """Values at t = 0 and t = 0.5 (nearest time node) on every spatial node."""
    grid = field.grid
    pts = grid.points.reshape(-1, grid.dim)
    rows = []
    for t in (0.0, 0.5 * grid.horizon):
        k = int(round(t / grid.dt))
        for i in range(field.m):
            vals = field.values[i, k].reshape(-1)
            rows.extend([repr(float(grid.t_nodes[k])), *(repr(float(c)) for c in p), i, repr(float(v))]
                        for p, v in zip(pts, vals))
    _write_rows(path, ["t", *[f"x{d}" for d in range(grid.dim)], "regime", "value"], rows)


# -- train -------------------------------------------------------------------


def _train_config(cfg: ExperimentConfig, family: str) -> TrainConfig:
    d = dict(TRAIN_DEFAULTS[family])
    tr = cfg.train
    for key in ("episodes", "batch", "rate", "schedule"):
        if getattr(tr, key) is not None:
            d[key] = getattr(tr, key)
    return TrainConfig(mode=tr.mode, seed=cfg.seed, A=tr.A, B=tr.B, nu=tr.nu, **d)


def slice_points(model, family: str, points: int = 201):
    """(label, varied coordinate, state array) for each plotted slice."""
    lo, hi = FAMILY_DEFAULTS[family]["slice"]
    s = np.linspace(lo, hi, points)
    if model.state_dim == 1:
        return [("x", s, s[:, None])]
    out = []
    for d in range(model.state_dim):
        x = np.ones((points, model.state_dim))
        x[:, d] = s
        out.append((f"x{d}", s, x))
    return out


def write_train_slices(path: Path, approx, xi, model, family: str, dt: float, t: float = 0.5) -> None:
    """Learned values and one-step switching probabilities pi_ij * dt at time t."""
    m = model.m
    header = ["slice", "coordinate", *[f"v{i}" for i in range(m)],
              *[f"p{i}{j}" for i in range(m) for j in range(m) if i != j]]
    rows = []
    for label, s, x in slice_points(model, family):
        v = approx.all_regimes(xi, t, x)
        gen = policy_from_params(approx, xi, t, x, model)
        for n in range(len(s)):
            probs = [gen[n, i, j] * dt for i in range(m) for j in range(m) if i != j]
            rows.append([label, repr(float(s[n])), *map(repr, map(float, v[n])), *map(repr, map(float, probs))])
    _write_rows(path, header, rows)


def cmd_train(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    family = cfg.base_family(model)
    d = FAMILY_DEFAULTS[family]
    tcfg = _train_config(cfg, family)
    approx = built_in(NETWORKS[family], model.m, model.state_dim, model.horizon, model.terminal_reward)
    sim = SimConfig.for_model(model, d["n_steps"], seed=cfg.seed)
    start = uniform_start(*d["start"], model.m, None if family == "linear-toy" else d["n_steps"])
    mhash = families.model_hash(model)
    try:
        rd = RunDir(cfg.out, f"train-{cfg.family}-seed{cfg.seed}")
        with rd as run:
            xi, trained = train(model, sim, tcfg, approx, start=start)
            trained.to_csv(run / "loss.csv")
            write_train_slices(run / "slices.csv", approx, xi, model, family, sim.dt)
            checkpoint.save(run / "checkpoint.npz", xi, approx.describe(), mhash,
                            {"seed": cfg.seed, "episodes": tcfg.episodes, "init_stream": [cfg.seed, 2**31 - 1]})
            write_manifest(run, "train", cfg, model, {"train": config_dict(tcfg), "n_steps": sim.n_steps,
                                                      "clamps": trained.clamps, "steps": trained.steps})
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {rd.final}")
    return 0


# -- verify ------------------------------------------------------------------


def cmd_verify(cfg: ExperimentConfig) -> int:
    suite = Suite(seed=cfg.seed, coarsen=cfg.coarsen)
    results = suite.run(cfg.criteria)
    width = max(len(r.name) for r in results)
    print(f"{'#':>2}  {'criterion':<{width}}  {'result':<6}  {'seconds':>8}  observed / tolerance")
    for r in results:
        print(f"{r.number:>2}  {r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:>8.1f}  "
              f"{r.observed} / {r.tolerance}")
    rd = RunDir(cfg.out, f"verify-seed{cfg.seed}")
    with rd as run:
        _write_rows(run / "verify.csv", ["criterion", "name", "passed", "observed", "tolerance", "seconds"],
                    [[r.number, r.name, r.passed, r.observed, r.tolerance, f"{r.seconds:.2f}"] for r in results])
        write_manifest(run, "verify", cfg, None)
    failed = [r.number for r in results if not r.passed]
    if failed:
        print(f"failed criteria: {failed}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SwitchingError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
