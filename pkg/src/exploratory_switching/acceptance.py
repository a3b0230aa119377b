"""The acceptance suite: one function per criterion, each returning a result row.

Expensive reference solves are cached on the ``Suite`` so criteria sharing a
grid do not solve twice.  ``coarsen`` divides every reference resolution, which
is the knob used to show that the PDE-dependent checks are sensitive to it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import families
from .classical import lambda_sweep, solve_variational_inequality
from .grid import SpaceTimeGrid
from .iteration import factorial_rate_fit, iterate, ratio_decrease_violations
from .model import SwitchingModel
from .pde import solve_exploratory_hjb
from .policy import GeneratorPolicy
from .rl import built_in, gradient_check, train, uniform_start
from .rl.learner import TrainConfig, orthogonality_solution
from .simulator import SimConfig, estimate_martingale_total, estimate_payoff, field_value

log = logging.getLogger(__name__)

CRITERIA = {
    1: "analytic symmetric case",
    2: "policy iteration agrees with direct solve",
    3: "monotone improvement",
    4: "superlinear iteration rate",
    5: "vanishing temperature",
    6: "martingale check",
    7: "monte carlo vs pde",
    8: "gradient check",
    9: "stochastic approximation rate",
    10: "regulator experiment",
    11: "put option experiment",
}

REGULATOR_TRAIN = dict(episodes=1000, batch=64, rate=1e-3, schedule="adam")
PUT_TRAIN = dict(episodes=1000, batch=512, rate=1e-4, schedule="adam")


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    observed: str
    tolerance: str
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.number:2d} {self.name}: {self.observed} (need {self.tolerance}; {self.seconds:.1f}s)"


def symmetric_model(m: int = 2, g: float = 0.5, lam: float = 0.2) -> SwitchingModel:
    """f = h = 0, equal costs: V_i = lambda (m - 1) exp(-g / lambda) (T - t)."""
    costs = np.full((m, m), g)
    np.fill_diagonal(costs, 0.0)
    return SwitchingModel(
        m=m,
        state_dim=1,
        drift=lambda t, x, i: np.full(np.shape(x), (-2.0, 2.0)[i % 2]),
        vol=lambda t, x, i: np.full(np.shape(x) + (1,), 0.5),
        running_reward=lambda t, x, i: np.zeros(np.shape(x)[:-1]),
        terminal_reward=lambda x: np.zeros(np.shape(x)[:-1]),
        switch_cost=costs,
        temperature=lam,
        horizon=1.0,
        reward_bound=0.0,
    )


def regulator_grid(nodes=601, steps=2000) -> SpaceTimeGrid:
    return SpaceTimeGrid(1.0, steps, (-3.0,), (3.0,), (nodes,))


def _coarse(n, c):
    return (n - 1) // c + 1


class Suite:
    def __init__(self, seed: int = 0, coarsen: int = 1):
        self.seed = seed
        self.coarsen = coarsen
        self.regulator = families.regulator()

    def grid(self, nodes=601, steps=2000):
        c = self.coarsen
        return regulator_grid(_coarse(nodes, c), max(1, steps // c))

    @cached_property
    def reference(self):
        return solve_exploratory_hjb(self.regulator, self.grid())

    @cached_property
    def fine_reference(self):
        return solve_exploratory_hjb(self.regulator, self.grid(1201, 4000))

    @cached_property
    def iteration(self):
        return iterate(self.regulator, self.grid(), max_iters=12, tol=1e-8, reference=self.reference)

    # -- criteria ----------------------------------------------------------

    def c1(self):
        model = symmetric_model()
        started = time.perf_counter()
        V = solve_exploratory_hjb(model, self.grid())
        seconds = time.perf_counter() - started
        exact = 0.2 * math.exp(-2.5) * (1.0 - V.grid.t_nodes)
        err = float(np.max(np.abs(V.values - exact[None, :, None])))
        ok = err < 1e-6 and seconds < 30
        return ok, f"sup error {err:.2e}, solve {seconds:.1f}s", "< 1e-06 and < 30 s", {"error": err}

    def c2(self):
        field, _, report = self.iteration
        gap = field.sup_distance(self.reference)
        ok = report.converged and report.iterations <= 12 and gap < 1e-6
        return ok, f"{report.iterations} iterations, sup gap {gap:.2e}", "converged in <= 12, gap < 1e-06", {
            "iterations": report.iterations, "gap": gap, "changes": report.changes}

    def c3(self):
        _, _, report = self.iteration
        worst = max(report.max_violations) if report.max_violations else 0.0
        return worst <= 1e-8, f"worst decrease {worst:.2e}", "<= 1e-08", {"violations": report.max_violations}

    def c4(self):
        _, _, report = self.iteration
        gaps = report.gaps
        coarse = solve_exploratory_hjb(self.regulator, self.grid(301, 1000))
        grid_error = float(np.max(np.abs(coarse.values - self.reference.values[:, ::2, ::2])))
        floor = 10.0 * grid_error
        bad, pairs = ratio_decrease_violations(gaps, floor, 0.1)
        # the window can be empty when the grid error is large; the ratios below it are reported too
        below, below_pairs = ratio_decrease_violations(gaps, 1e-12, 0.1)
        fit = factorial_rate_fit(gaps, 2, 8)
        ok = bad == 0 and fit["r2"] >= 0.9 and fit["factorial_coef"] < 0
        obs = (f"ratio violations {bad}/{pairs} in [{floor:.1e}, 0.1]{' (empty window)' if pairs == 0 else ''}, "
               f"{below}/{below_pairs} down to 1e-12, R2 {fit['r2']:.3f} "
               f"(log n! coef {fit['factorial_coef']:.2f}; unit-coef R2 {fit['r2_unit']:.3f})")
        return ok, obs, "0 violations, R2 >= 0.9, negative log n! coef", {"gaps": gaps, "fit": fit, "floor": floor}

    def c5(self):
        started = time.perf_counter()
        vi = solve_variational_inequality(self.regulator, self.grid())
        rows = lambda_sweep(self.regulator, self.grid(), [0.2, 0.1, 0.05, 0.01], reference=vi)
        seconds = time.perf_counter() - started
        dist = [r.sup_distance for r in rows]
        ok = all(b < a for a, b in zip(dist, dist[1:])) and seconds < 300
        return ok, "distances " + ", ".join(f"{d:.3f}" for d in dist) + f" in {seconds:.0f}s", \
            "strictly decreasing, < 300 s", {"distances": dist}

    def c6(self):
        V = self.reference
        pol = GeneratorPolicy.from_field(V, self.regulator)
        sim = SimConfig.for_model(self.regulator, 100, batch=100_000, seed=self.seed)
        start = (np.zeros(1), 0)
        plain = estimate_martingale_total(self.regulator, pol, field_value(V), sim, start)
        eps = 0.1
        biased = lambda t, x, i: V.interpolate_regime(t, x, i) + eps * t
        planted = estimate_martingale_total(self.regulator, pol, biased, sim, start)
        z0 = plain.mean / plain.stderr
        z1 = planted.mean / planted.stderr
        ok = abs(z0) < 3 and z1 > 5
        return ok, f"mean {plain.mean:.4f} ({z0:+.2f} se), planted {planted.mean:.4f} ({z1:+.1f} se)", \
            "|z| < 3, planted z > 5", {"mean": plain.mean, "se": plain.stderr, "planted": planted.mean}

    def c7(self):
        V = self.fine_reference
        pol = GeneratorPolicy.from_field(V, self.regulator)
        sim = SimConfig.for_model(self.regulator, 1000, batch=1_000_000, seed=self.seed)
        est = estimate_payoff(self.regulator, pol, sim, (np.zeros(1), 0))
        target = float(V.values[0, 0, (V.grid.nodes[0] - 1) // 2])
        z = est.z(target)
        return abs(z) < 3, f"mc {est.mean:.5f} +- {est.stderr:.5f} vs pde {target:.5f} ({z:+.2f} se)", \
            "|z| < 3", {"mc": est.mean, "se": est.stderr, "pde": target, "clamp_rate": est.clamp_rate}

    def c8(self):
        rng = np.random.default_rng(self.seed)
        worst = {}
        for name, model in (("regulator", self.regulator), ("put-options", families.put_options()),
                            ("linear", families.linear_toy())):
            ap = built_in(name, model.m, model.state_dim, model.horizon, model.terminal_reward)
            xi = ap.init(rng) + (rng.normal(size=ap.n_params) if name == "linear" else 0.0)
            n = 4
            t = rng.uniform(0, model.horizon, n)
            x = rng.uniform(0.5, 1.5, (n, model.state_dim))
            i = rng.integers(0, model.m, n)
            worst[name] = gradient_check(ap, xi, t, x, i, probes=100, rng=rng)
        top = max(worst.values())
        return top < 1e-5, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), "< 1e-05", worst

    def c9(self, seeds: int = 20):
        slopes = sa_slopes(seeds, self.seed)
        med = float(np.median(slopes))
        return -0.65 <= med <= -0.35, f"median slope {med:.3f} over {seeds} seeds", "in [-0.65, -0.35]", {
            "slopes": slopes}

    def c10(self):
        started = time.perf_counter()
        xi, trained, ap = train_regulator(self.seed)
        seconds = time.perf_counter() - started
        early, late = trained.window_mean(1, 100), trained.window_mean(800, 1000)
        ratio = late / early
        err = regulator_error(ap, xi, self.reference)
        ok = ratio < 0.25 and err <= 0.1 and seconds < 900
        return ok, f"loss ratio {ratio:.3f}, sup error {err:.3f}, {seconds:.0f}s", \
            "ratio < 0.25, error <= 0.1, < 900 s", {"ratio": ratio, "error": err, "losses": trained.losses}

    def c11(self):
        started = time.perf_counter()
        xi, trained, ap = train_puts(self.seed)
        seconds = time.perf_counter() - started
        worst = put_monotonicity(ap, xi)
        ok = worst <= 1e-3 and seconds < 1800
        return ok, f"largest increase along slices {worst:.2e}, {seconds:.0f}s", "<= 1e-03, < 1800 s", {
            "worst_increase": worst}

    def run(self, numbers=None) -> list[Result]:
        out = []
        for n in numbers or sorted(CRITERIA):
            started = time.perf_counter()
            try:
                ok, observed, tol, details = getattr(self, f"c{n}")()
            except Exception as exc:  # a crash is a failed criterion, reported not raised
                log.exception("criterion %d crashed", n)
                ok, observed, tol, details = False, f"error: {exc}", "runs", {}
            res = Result(n, CRITERIA[n], bool(ok), observed, tol, time.perf_counter() - started, details)
            log.info(res.line())
            out.append(res)
        return out


# -- experiment helpers shared with the CLI ------------------------------------


def sa_slopes(seeds: int = 20, base_seed: int = 0, episodes: int = 10_000):
    """Log-log slope of |xi_i - xi*| over episodes 1e2..1e4 of the linear toy, per seed.

    xi* solves the orthogonality system by least squares over one large batch,
    so the discretisation bias of the rollout is shared with the learner.
    """
    toy = families.linear_toy()
    ap = built_in("linear", toy.m, 1, toy.horizon, toy.terminal_reward)
    sim = SimConfig.for_model(toy, 10)
    start = uniform_start(-1.0, 1.0, toy.m)
    star = orthogonality_solution(toy, ap, sim, start, 200_000, base_seed + 10**6)
    slopes = []
    for s in range(seeds):
        errs = []
        cfg = TrainConfig(episodes=episodes, batch=1, schedule="robbins-monro", A=5.0, B=20.0, nu=1.0,
                          seed=base_seed * 1000 + s)
        train(toy, sim, cfg, ap, start=start,
              trace=lambda ep, xi: errs.append(float(np.linalg.norm(xi - star))))
        n = np.arange(1, len(errs) + 1)
        sel = n >= 100
        slopes.append(float(np.polyfit(np.log(n[sel]), np.log(np.asarray(errs)[sel]), 1)[0]))
    return slopes


def train_regulator(seed=0, episodes=None, **overrides):
    model = families.regulator()
    ap = built_in("regulator", model.m, 1, model.horizon, model.terminal_reward)
    sim = SimConfig.for_model(model, 100)
    opts = dict(REGULATOR_TRAIN, seed=seed, **overrides)
    if episodes is not None:
        opts["episodes"] = episodes
    xi, trained = train(model, sim, TrainConfig(**opts), ap, start=uniform_start(-2.5, 2.5, model.m, 100))
    return xi, trained, ap


def train_puts(seed=0, episodes=None, **overrides):
    model = families.put_options()
    ap = built_in("put-options", model.m, 2, model.horizon, model.terminal_reward)
    sim = SimConfig.for_model(model, 50)
    opts = dict(PUT_TRAIN, seed=seed, **overrides)
    if episodes is not None:
        opts["episodes"] = episodes
    xi, trained = train(model, sim, TrainConfig(**opts), ap, start=uniform_start((0.5, 0.5), (1.5, 1.5), model.m, 50))
    return xi, trained, ap


def regulator_error(ap, xi, reference) -> float:
    xs = np.linspace(-2.0, 2.0, 81)[:, None]
    return max(
        float(np.max(np.abs(ap.all_regimes(xi, t, xs) - reference.interpolate(t, xs))))
        for t in (0.0, 0.5)
    )


def put_slices(ap, xi, points: int = 21, lower: float = 0.5, upper: float = 1.5):
    """Values at t = 0.5 along s^A with s^B = 1, and along s^B with s^A = 1: two (points, 3) arrays."""
    s = np.linspace(lower, upper, points)
    along_a = np.column_stack([s, np.ones_like(s)])
    along_b = np.column_stack([np.ones_like(s), s])
    return s, ap.all_regimes(xi, 0.5, along_a), ap.all_regimes(xi, 0.5, along_b)


def put_monotonicity(ap, xi) -> float:
    """Largest increase between neighbouring slice points (0 when decreasing everywhere)."""
    _, va, vb = put_slices(ap, xi)
    return float(max(np.max(np.diff(va, axis=0)), np.max(np.diff(vb, axis=0)), 0.0))
