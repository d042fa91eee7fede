"""Learner comparison grid, ablation grid and the denoising experiment.

A grid is a set of independent cells (scenario, learner or config, seed).
Cells run in a process pool when ``jobs > 1``; results are collected in
task order, so reports do not depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DynamicsConfig, phi_step
from .errors import DivergenceError, PreconditionError
from .learning import LEARNERS, LearnerConfig, TrainResult, train, train_gd, train_jgd, train_simple
from .scenarios import GENERATOR_VERSION, ScenarioSpec, generate, with_dynamics
from .solver import NewtonConfig, contraction_certificate, denoising_trace, effective_rate, newton_fixed_point

GRID_HEADER = ("scenario", "learner", "seed", "final_error", "epochs_run", "accepted_count", "status")
HISTORY_HEADER = ("epoch", "error_norm", "reward", "lambda_a", "accepted", "grad_norm")
DENOISE_HEADER = ("noise_level", "seed", "t", "distance")

# trace comparisons allow for rounding in the distance computation itself
TRACE_TOL = 1e-12
# steps with d_t at or below this are left out of the empirical rate
RATE_FLOOR = 1e-6


@dataclass(frozen=True)
class AblationConfig:
    name: str
    use_mask: bool = True
    use_residual: bool = True
    use_anchor: bool = True
    use_jgd: bool = True
    simple: bool = False  # the delta-rule FCM instead of the attractor map

    def apply(self, dyn: DynamicsConfig) -> DynamicsConfig:
        return replace(dyn, use_mask=self.use_mask, use_residual=self.use_residual, use_anchor=self.use_anchor)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "use_mask": self.use_mask,
            "use_residual": self.use_residual,
            "use_anchor": self.use_anchor,
            "use_jgd": self.use_jgd,
            "simple": self.simple,
        }


def _cfg(name, mask, res, anchor, jgd):
    return AblationConfig(name, use_mask=mask, use_residual=res, use_anchor=anchor, use_jgd=jgd)


ABLATION_CONFIGS = (
    _cfg("Full J-GD", True, True, True, True),
    _cfg("No Mask", False, True, True, True),
    _cfg("No Res.", True, False, True, True),
    _cfg("GD only", False, False, True, False),
    _cfg("No Mask+Res.", False, False, True, True),
    _cfg("No J-GD+Res.", True, False, True, False),
    _cfg("No J-GD+Mask", False, True, True, False),
    _cfg("No Anchor", True, True, False, True),
    _cfg("No Anchor+Mask", False, True, False, True),
    _cfg("No Anchor+Res.", True, False, False, True),
    _cfg("No Anchor+J-GD", True, True, False, False),
    _cfg("No Anchor+Mask+Res.", False, False, False, True),
    AblationConfig("Simple FCM", use_mask=False, use_residual=False, use_anchor=False, use_jgd=False, simple=True),
)

ABLATION_NAMES = tuple(c.name for c in ABLATION_CONFIGS)


def ablation_config(name: str) -> AblationConfig:
    for c in ABLATION_CONFIGS:
        if c.name == name:
            return c
    raise ValueError(f"unknown ablation config {name!r}; expected one of {ABLATION_NAMES}")


# -- cells -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CellResult:
    scenario: str
    label: str
    seed: int
    final_error: float
    epochs_run: int
    accepted_count: int
    status: str  # "ok" or "diverged"
    message: str = ""
    result: TrainResult | None = None


@dataclass(frozen=True)
class _Task:
    scenario: object  # kind name or ScenarioSpec
    label: str
    seed: int
    learner: str | None
    ablation: AblationConfig | None
    config: LearnerConfig
    keep_result: bool
    overrides: tuple = ()


def _scenario_for(scenario, seed, overrides=()) -> ScenarioSpec:
    spec = scenario if isinstance(scenario, ScenarioSpec) else generate(scenario, seed)
    return with_dynamics(spec, **dict(overrides)) if overrides else spec


def _scenario_name(scenario) -> str:
    return scenario.name if isinstance(scenario, ScenarioSpec) else str(scenario)


def _train_ablation(ab: AblationConfig, spec: ScenarioSpec, config: LearnerConfig) -> TrainResult:
    if ab.simple:
        return train_simple(spec, config)
    config = config.resolved(spec)
    config = replace(config, dynamics=ab.apply(config.dynamics), use_jgd=ab.use_jgd)
    if ab.use_jgd:
        return train_jgd(spec, config)
    return train_gd(spec, config, masked=ab.use_mask)


def _run_cell(task: _Task) -> CellResult:
    spec = _scenario_for(task.scenario, task.seed, task.overrides)
    name = _scenario_name(task.scenario)
    try:
        if task.ablation is not None:
            res = _train_ablation(task.ablation, spec, task.config)
        else:
            res = train(task.learner, spec, task.config)
    except DivergenceError as exc:
        return CellResult(name, task.label, task.seed, math.nan, 0, 0, "diverged", str(exc))
    return CellResult(
        scenario=name,
        label=task.label,
        seed=task.seed,
        final_error=res.final_error,
        epochs_run=len(res.history),
        accepted_count=res.accepted_count,
        status="ok",
        result=res if task.keep_result else None,
    )


def default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - not on Linux
        return os.cpu_count() or 1


def _run_tasks(tasks, jobs):
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_run_cell, tasks))


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class GridRow:
    scenario: str
    label: str
    mean: float
    std: float
    seeds: tuple
    failed_seeds: tuple
    winner: bool = False

    @property
    def complete(self) -> bool:
        return not self.failed_seeds


@dataclass(frozen=True, eq=False)
class GridReport:
    kind: str  # "comparison" or "ablation"
    rows: tuple
    cells: tuple
    meta: dict = field(default_factory=dict)

    def row(self, scenario: str, label: str) -> GridRow:
        for r in self.rows:
            if r.scenario == scenario and r.label == label:
                return r
        raise KeyError((scenario, label))

    def winners(self) -> dict:
        return {r.scenario: r.label for r in self.rows if r.winner}

    @property
    def complete(self) -> bool:
        return all(r.complete for r in self.rows)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "meta": self.meta,
            "complete": self.complete,
            "rows": [
                {
                    "scenario": r.scenario,
                    "label": r.label,
                    "mean": _json_float(r.mean),
                    "std": _json_float(r.std),
                    "seeds": list(r.seeds),
                    "failed_seeds": list(r.failed_seeds),
                    "winner": r.winner,
                }
                for r in self.rows
            ],
            "winners": self.winners(),
            "orderings": [list(o) for o in check_orderings(self)] if self.kind == "comparison" else [],
        }


def _json_float(x):
    return None if not math.isfinite(x) else x


def _aggregate(cells, scenarios, labels) -> tuple:
    rows = []
    for sc in scenarios:
        block = []
        for lab in labels:
            mine = [c for c in cells if c.scenario == sc and c.label == lab]
            ok = [c.final_error for c in mine if c.status == "ok"]
            failed = tuple(c.seed for c in mine if c.status != "ok")
            mean = float(np.mean(ok)) if ok else math.nan
            std = float(np.std(ok)) if ok else math.nan
            block.append(GridRow(sc, lab, mean, std, tuple(c.seed for c in mine), failed))
        finite = [r.mean for r in block if math.isfinite(r.mean)]
        best = min(finite) if finite else None
        seen = False
        for r in block:
            win = best is not None and not seen and r.mean == best
            seen = seen or win
            rows.append(replace(r, winner=win))
    return tuple(rows)


def _meta(scenarios, seeds, config, overrides, **extra):
    names = [_scenario_name(s) for s in scenarios]
    return {
        "generator_version": GENERATOR_VERSION,
        "scenarios": names,
        "seeds": [int(s) for s in seeds],
        "config": config.to_dict(),
        "dynamics_overrides": dict(overrides),
        **extra,
    }


def _check_inputs(scenarios, labels, seeds):
    if not scenarios or not labels or not seeds:
        raise ValueError("scenarios, learners/configs and seeds must all be non-empty")


def run_comparison(
    scenarios,
    learners,
    seeds,
    config: LearnerConfig | None = None,
    jobs: int | None = 1,
    keep_results: bool = False,
    overrides: dict | None = None,
) -> GridReport:
    """Train every learner on every scenario for every seed.

    ``scenarios`` holds built-in kind names (generated per seed) or
    ready-made :class:`ScenarioSpec` objects (used as given for every seed).
    ``overrides`` replaces fields of each scenario's own dynamics.
    """
    _check_inputs(scenarios, learners, seeds)
    config = config or LearnerConfig()
    ov = tuple(sorted((overrides or {}).items()))
    for lr in learners:
        if lr not in LEARNERS:
            raise ValueError(f"unknown learner {lr!r}; expected one of {LEARNERS}")
    tasks = [
        _Task(sc, lr, int(seed), lr, None, config, keep_results, ov)
        for sc in scenarios
        for lr in learners
        for seed in seeds
    ]
    cells = _run_tasks(tasks, jobs)
    names = [_scenario_name(s) for s in scenarios]
    return GridReport(
        "comparison",
        _aggregate(cells, names, list(learners)),
        tuple(cells),
        _meta(scenarios, seeds, config, ov, learners=list(learners), notes=COMPARISON_NOTES),
    )


def run_ablation(
    scenarios,
    configs,
    seeds,
    config: LearnerConfig | None = None,
    jobs: int | None = 1,
    keep_results: bool = False,
    overrides: dict | None = None,
) -> GridReport:
    """Same aggregation as :func:`run_comparison` over ablation configs."""
    _check_inputs(scenarios, configs, seeds)
    config = config or LearnerConfig()
    ov = tuple(sorted((overrides or {}).items()))
    configs = [ablation_config(c) if isinstance(c, str) else c for c in configs]
    tasks = [
        _Task(sc, ab.name, int(seed), None, ab, config, keep_results, ov)
        for sc in scenarios
        for ab in configs
        for seed in seeds
    ]
    cells = _run_tasks(tasks, jobs)
    names = [_scenario_name(s) for s in scenarios]
    return GridReport(
        "ablation",
        _aggregate(cells, names, [c.name for c in configs]),
        tuple(cells),
        _meta(scenarios, seeds, config, ov, configs=[c.to_dict() for c in configs]),
    )


# provenance notes carried in every comparison report
COMPARISON_NOTES = {
    "hebbian": "stand-in rule dW = eta * (outer(h_t, h_t+1) - decay * W); no reference rule exists",
    "omitted_learners": "ACO and GD-MCTS columns are not implemented; the grid has four learners",
}

# orderings checked on comparison grids: (scenario kinds, better, worse)
ORDERINGS = (
    (("S1", "S2", "S4"), "jgd", "gd"),
    (("S1", "S2", "S4"), "gd", "simple"),
    (("S1", "S2", "S4"), "gd", "hebbian"),
    (("S3",), "jgd", "simple"),
)


def check_orderings(report: GridReport) -> list:
    """``(scenario, better, worse, holds)`` for every ordering the grid can evaluate."""
    out = []
    present = {(r.scenario, r.label): r for r in report.rows}
    for kinds, better, worse in ORDERINGS:
        for sc in kinds:
            a, b = present.get((sc, better)), present.get((sc, worse))
            if a is None or b is None:
                continue
            out.append((sc, better, worse, bool(a.mean < b.mean)))
    return out


# -- denoising ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DenoisingTrace:
    noise_level: float
    seed: int
    distances: np.ndarray
    empirical_rate: float
    bound_holds: bool


@dataclass(frozen=True, eq=False)
class DenoisingReport:
    scenario: str
    bound: float
    rate: float
    fixed_point: np.ndarray
    traces: tuple

    @property
    def all_bounded(self) -> bool:
        return all(t.bound_holds for t in self.traces)

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "certified_bound": self.bound,
            "certified_rate": self.rate,
            "all_bounded": self.all_bounded,
            "traces": [
                {
                    "noise_level": t.noise_level,
                    "seed": t.seed,
                    "d0": float(t.distances[0]),
                    "d_final": float(t.distances[-1]),
                    "empirical_rate": t.empirical_rate,
                    "bound_holds": t.bound_holds,
                }
                for t in self.traces
            ],
        }


def noise_direction(n: int, seed: int) -> np.ndarray:
    u = np.random.default_rng(int(seed)).standard_normal(n)
    return u / np.linalg.norm(u)


def empirical_rate(distances) -> float:
    """Largest one-step ratio ``d_{t+1} / d_t`` over steps with ``d_t > RATE_FLOOR``."""
    d = np.asarray(distances, dtype=float)
    keep = d[:-1] > RATE_FLOOR
    if not np.any(keep):
        return 0.0
    return float(np.max(d[1:][keep] / d[:-1][keep]))


def _polish(h, ws, dyn, max_steps=200):
    """Forward-step a converged root until it is a fixed point of the floating-point map itself.

    Newton stops within ~1e-15 of the true root, which would leave a nonzero
    zero-noise trace. Falls back to the best iterate if rounding cycles.
    """
    best, best_gap = h, math.inf
    for _ in range(max_steps):
        nxt = phi_step(h, ws, dyn)
        gap = float(np.max(np.abs(nxt - h)))
        if gap < best_gap:
            best, best_gap = h, gap
        if gap == 0.0:
            return h
        h = nxt
    return best


def run_denoising(spec: ScenarioSpec, noise_levels, seeds, steps: int = 50) -> DenoisingReport:
    """Perturb the fixed point by ``level * u`` (``u`` a seeded unit vector) and track the distance.

    Raises
    ------
    PreconditionError
        If the weights fail the contraction certificate; the message carries the bound.
    """
    dyn = spec.dynamics
    ws = spec.weights()
    cert = contraction_certificate(ws, steepness=dyn.steepness, anchor=dyn.use_anchor)
    if not cert.contractive:
        raise PreconditionError(f"weights are not certified contractive (bound {cert.bound:.6g} >= 1)")
    rate = effective_rate(cert, dyn)
    fp = newton_fixed_point(spec.h_target, ws, NewtonConfig(epsilon=1e-13), dynamics=dyn).h_star
    fp = _polish(fp, ws, dyn)
    powers = rate ** np.arange(steps + 1)
    traces = []
    for level in noise_levels:
        for seed in seeds:
            noise = float(level) * noise_direction(spec.n, seed)
            d = denoising_trace(fp, noise, ws, dyn, steps)
            ok = bool(np.all(d <= powers * d[0] + TRACE_TOL))
            traces.append(DenoisingTrace(float(level), int(seed), d, empirical_rate(d), ok))
    return DenoisingReport(spec.name, cert.bound, rate, fp, tuple(traces))


# -- files -------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_grid_csv(report: GridReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for c in report.cells:
            w.writerow([c.scenario, c.label, c.seed, _fmt(c.final_error), c.epochs_run, c.accepted_count, c.status])


def read_grid_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GRID_HEADER:
            raise ValueError(f"{path}: unexpected grid header {reader.fieldnames}")
        return [
            {
                "scenario": r["scenario"],
                "learner": r["learner"],
                "seed": int(r["seed"]),
                "final_error": float(r["final_error"]),
                "epochs_run": int(r["epochs_run"]),
                "accepted_count": int(r["accepted_count"]),
                "status": r["status"],
            }
            for r in reader
        ]


def write_history_csv(result: TrainResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in result.history:
            w.writerow([r.epoch, _fmt(r.error_norm), _fmt(r.reward), _fmt(r.lambda_a), _fmt(r.accepted), _fmt(r.grad_norm)])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_HEADER:
            raise ValueError(f"{path}: unexpected history header {reader.fieldnames}")
        return [
            {
                "epoch": int(r["epoch"]),
                "error_norm": float(r["error_norm"]),
                "reward": float(r["reward"]),
                "lambda_a": float(r["lambda_a"]),
                "accepted": r["accepted"] == "1",
                "grad_norm": float(r["grad_norm"]),
            }
            for r in reader
        ]


def write_denoising_csv(report: DenoisingReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DENOISE_HEADER)
        for tr in report.traces:
            for t, d in enumerate(tr.distances):
                w.writerow([_fmt(tr.noise_level), tr.seed, t, _fmt(float(d))])


def read_denoising_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DENOISE_HEADER:
            raise ValueError(f"{path}: unexpected denoising header {reader.fieldnames}")
        return [
            {
                "noise_level": float(r["noise_level"]),
                "seed": int(r["seed"]),
                "t": int(r["t"]),
                "distance": float(r["distance"]),
            }
            for r in reader
        ]


def write_json(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
