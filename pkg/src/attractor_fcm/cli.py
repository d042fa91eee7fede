"""``afcm`` command line: scenario generation, single runs, grids, denoising, certificates.

Exit codes: 0 success (or contractive), 1 usage error, 2 divergence,
3 non-convergence (or not contractive), 4 file errors.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import WeightSystem
from .errors import DimensionError, DivergenceError, InvariantError, NoConvergenceError, PreconditionError, SchemaError
from .harness import (
    ABLATION_CONFIGS,
    ABLATION_NAMES,
    default_jobs,
    run_ablation,
    run_comparison,
    run_denoising,
    write_denoising_csv,
    write_grid_csv,
    write_history_csv,
    write_json,
)
from .learning import LEARNERS, LearnerConfig, train
from .scenarios import ALL_KINDS, STRESS_KINDS, ScenarioSpec, from_dict, generate, load_scenario, save_scenario, with_dynamics
from .solver import contraction_certificate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list:
    """``"3"``, ``"1..10"`` or comma-separated mixes such as ``"1..3,7"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..", 1)
                lo, hi = int(lo), int(hi)
                if hi < lo:
                    raise UsageError(f"empty seed range {part!r}")
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("no seeds given")
    return seeds


def _split(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


# -- shared option groups ----------------------------------------------------


def _add_out(p, default="."):
    p.add_argument("--out", default=default, help="output directory (created if absent)")
    p.add_argument("--force", action="store_true", help="overwrite existing output files")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--eta", type=float)
    g.add_argument("--unroll", type=int, help="BPTT unroll length T")
    g.add_argument("--epsilon", type=float, help="Newton residual tolerance")
    g.add_argument("--newton-iters", type=int)
    g.add_argument("--fallback-steps", type=int, help="forward-iteration steps after a failed Newton solve")
    g.add_argument("--no-jgd", action="store_true", help="plain gradient steps instead of the J-GD update")


def _add_dynamics(p, toggles=True):
    g = p.add_argument_group("dynamics (override the scenario's own settings)")
    g.add_argument("--alpha", type=float)
    g.add_argument("--steepness", type=float)
    if toggles:
        g.add_argument("--no-mask", action="store_true")
        g.add_argument("--no-residual", action="store_true")
        g.add_argument("--no-anchor", action="store_true")


def _add_seeds(p):
    p.add_argument("--seeds", help="seed list, e.g. 1..10 or 1,4,7")
    p.add_argument("--seed", type=int, help="single seed (same as --seeds N)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="afcm", description="Attractor fuzzy cognitive maps: learning, grids and checks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress the stdout summary (errors still go to stderr)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a generated scenario file")
    p.add_argument("kind", choices=ALL_KINDS)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)

    p = sub.add_parser("run", help="train one learner on one scenario")
    p.add_argument("scenario", help="built-in kind (S1..S4, Q1..Q3) or a scenario file")
    p.add_argument("--learner", choices=LEARNERS, default="jgd")
    p.add_argument("--seed", type=int, default=0, help="generator seed for built-in kinds")
    _add_training(p)
    _add_dynamics(p)
    _add_out(p)

    p = sub.add_parser("bench", help="learner comparison grid")
    p.add_argument("--scenarios", default=",".join(STRESS_KINDS))
    p.add_argument("--learner", "--learners", dest="learners", default=",".join(LEARNERS))
    _add_seeds(p)
    p.add_argument("--trajectories", action="store_true", help="also write one history CSV per cell")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available CPUs)")
    _add_training(p)
    _add_dynamics(p)
    _add_out(p)

    p = sub.add_parser("ablate", help="ablation grid over the named configurations")
    p.add_argument("--scenarios", default=",".join(STRESS_KINDS))
    p.add_argument("--configs", default=None, help="comma-separated config names (default: all 13)")
    p.add_argument("--full-grid", action="store_true", help="all 13 configs on all 7 scenarios")
    _add_seeds(p)
    p.add_argument("--jobs", type=int, default=None)
    _add_training(p)
    _add_dynamics(p, toggles=False)
    _add_out(p)

    p = sub.add_parser("denoise", help="noise-decay traces on a contractive scenario")
    p.add_argument("scenario", nargs="?", default="S3")
    p.add_argument("--seed", type=int, default=0, help="generator seed for built-in kinds")
    p.add_argument("--levels", default="0.1,0.25,0.5,1.0", help="noise norms")
    p.add_argument("--seeds", default="1..5", help="noise-direction seeds")
    p.add_argument("--steps", type=int, default=50)
    _add_dynamics(p)
    _add_out(p)

    p = sub.add_parser("check", help="contraction certificate of a weight or scenario file")
    p.add_argument("path")
    p.add_argument("--steepness", type=float, default=1.0)
    p.add_argument("--no-anchor", action="store_true")
    return ap


# -- helpers -----------------------------------------------------------------


def _seeds(args, default="1..10") -> list:
    if args.seeds is not None and args.seed is not None:
        raise UsageError("give either --seed or --seeds, not both")
    if args.seed is not None:
        return [args.seed]
    return parse_seeds(args.seeds or default)


def _overrides(args) -> dict:
    ov = {}
    if getattr(args, "alpha", None) is not None:
        ov["alpha"] = args.alpha
    if getattr(args, "steepness", None) is not None:
        ov["steepness"] = args.steepness
    for flag, key in (("no_mask", "use_mask"), ("no_residual", "use_residual"), ("no_anchor", "use_anchor")):
        if getattr(args, flag, False):
            ov[key] = False
    return ov


def _learner_config(args) -> LearnerConfig:
    base = LearnerConfig()
    kw = {}
    for flag, key in (("epochs", "epochs"), ("eta", "eta"), ("unroll", "unroll_T")):
        val = getattr(args, flag, None)
        if val is not None:
            kw[key] = val
    if getattr(args, "no_jgd", False):
        kw["use_jgd"] = False
    nk = {}
    for flag, key in (("epsilon", "epsilon"), ("newton_iters", "max_iters"), ("fallback_steps", "fallback_steps")):
        val = getattr(args, flag, None)
        if val is not None:
            nk[key] = val
    if nk:
        kw["newton"] = replace(base.newton, **nk)
    return replace(base, **kw)


def _load(path) -> ScenarioSpec:
    try:
        return load_scenario(path)
    except (DimensionError, InvariantError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _scenario(ref: str, seed: int) -> ScenarioSpec:
    if ref in ALL_KINDS:
        return generate(ref, seed)
    return _load(ref)


def _prepare(out: str, names, force: bool) -> dict:
    """Create ``out`` and refuse to clobber any of ``names`` unless forced."""
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    paths = {n: d / n for n in names}
    if not force:
        taken = [str(p) for p in paths.values() if p.exists()]
        if taken:
            raise FileExistsError(f"refusing to overwrite {', '.join(taken)} (use --force)")
    return paths


def _write_weights(w, path) -> None:
    lines = [",".join(repr(float(x)) for x in row) for row in np.asarray(w)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_weights(path) -> np.ndarray:
    """A scenario file's ``w_initial`` or a plain comma/whitespace separated matrix."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
        if "w_initial" not in data:
            raise SchemaError("missing field", field="w_initial")
        try:
            return np.asarray(from_dict(data).w_initial)
        except (DimensionError, InvariantError) as exc:
            raise SchemaError(str(exc)) from exc
    rows = [r.replace(",", " ").split() for r in text.splitlines() if r.strip() and not r.lstrip().startswith("#")]
    try:
        w = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise SchemaError(f"non-numeric weight entry: {exc}") from exc
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise SchemaError(f"weight matrix must be square, got {len(rows)} rows of unequal or mismatched length")
    return w


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6g}"


def _print_grid(report, out=sys.stdout):
    width = max(len(r.label) for r in report.rows)
    for r in report.rows:
        flag = " *" if r.winner else ""
        miss = f"  failed seeds {list(r.failed_seeds)}" if r.failed_seeds else ""
        print(f"{r.scenario:<4} {r.label:<{width}}  mean {_fmt(r.mean):>10}  std {_fmt(r.std):>10}{flag}{miss}", file=out)


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = generate(args.kind, args.seed)
    name = f"{args.kind}-seed{args.seed}.json"
    paths = _prepare(args.out, [name], args.force)
    save_scenario(spec, paths[name])
    cert = contraction_certificate(spec.weights(), spec.dynamics.steepness, spec.dynamics.use_anchor)
    print(f"wrote {paths[name]} (n={spec.n})")
    print(f"certificate: bound={cert.bound:.6g} contractive={str(cert.contractive).lower()}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _scenario(args.scenario, args.seed)
    ov = _overrides(args)
    if ov:
        spec = with_dynamics(spec, **ov)
    config = _learner_config(args).resolved(spec)
    paths = _prepare(args.out, ["config.json", "history.csv", "weights.csv", "result.json"], args.force)
    write_json(
        {"scenario": spec.name, "seed": spec.seed, "learner": args.learner, "learner_config": config.to_dict()},
        paths["config.json"],
    )
    res = train(args.learner, spec, config)
    write_history_csv(res, paths["history.csv"])
    _write_weights(res.final_weights.w, paths["weights.csv"])
    write_json(
        {
            "learner": res.learner,
            "initial_error": res.initial_error,
            "final_error": res.final_error,
            "converged": res.converged,
            "epochs_run": len(res.history),
            "accepted_count": res.accepted_count,
        },
        paths["result.json"],
    )
    status = "converged" if res.converged else "not converged"
    print(f"{spec.name} {res.learner}: final_error={res.final_error!r} initial_error={res.initial_error!r} {status}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_bench(args) -> int:
    scenarios = _split(args.scenarios)
    learners = _split(args.learners)
    for lr in learners:
        if lr not in LEARNERS:
            raise UsageError(f"unknown learner {lr!r}; expected one of {', '.join(LEARNERS)}")
    seeds = _seeds(args)
    config = _learner_config(args)
    ov = _overrides(args)
    paths = _prepare(args.out, ["config.json", "grid.csv", "summary.json"], args.force)
    hist_dir = Path(args.out) / "trajectories"
    if args.trajectories:
        hist_dir.mkdir(exist_ok=True)
        names = [f"{s}_{lr}_{seed}.csv" for s in scenarios for lr in learners for seed in seeds]
        _prepare(hist_dir, names, args.force)
    write_json(
        {"command": "bench", "scenarios": scenarios, "learners": learners, "seeds": seeds,
         "learner_config": config.to_dict(), "dynamics_overrides": ov},
        paths["config.json"],
    )
    report = run_comparison(
        _scenario_refs(scenarios), learners, seeds, config, jobs=_jobs(args), keep_results=args.trajectories, overrides=ov
    )
    write_grid_csv(report, paths["grid.csv"])
    write_json(report.summary(), paths["summary.json"])
    if args.trajectories:
        for c in report.cells:
            if c.result is not None:
                write_history_csv(c.result, hist_dir / f"{c.scenario}_{c.label}_{c.seed}.csv")
    _print_grid(report)
    print(f"{len(report.cells)} runs, {len(report.rows)} rows -> {paths['grid.csv']}")
    if not report.complete:
        print("partial grid: some cells diverged (see grid.csv status column)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _scenario_refs(names):
    """Built-in kinds stay names (generated per seed); anything else is loaded once."""
    return [n if n in ALL_KINDS else _load(n) for n in names]


def _jobs(args) -> int:
    jobs = args.jobs if args.jobs is not None else default_jobs()
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return jobs


def cmd_ablate(args) -> int:
    if args.full_grid:
        scenarios, configs = list(ALL_KINDS), list(ABLATION_CONFIGS)
    else:
        scenarios = _split(args.scenarios)
        if args.configs:
            names = _split(args.configs)
            bad = [n for n in names if n not in ABLATION_NAMES]
            if bad:
                raise UsageError(f"unknown config(s) {bad}; expected names from {list(ABLATION_NAMES)}")
            configs = names
        else:
            configs = list(ABLATION_CONFIGS)
    seeds = _seeds(args, default="1..3")
    config = _learner_config(args)
    ov = _overrides(args)
    paths = _prepare(args.out, ["config.json", "grid.csv", "summary.json"], args.force)
    write_json(
        {"command": "ablate", "scenarios": scenarios, "seeds": seeds, "learner_config": config.to_dict(),
         "dynamics_overrides": ov, "configs": [c if isinstance(c, str) else c.name for c in configs]},
        paths["config.json"],
    )
    report = run_ablation(_scenario_refs(scenarios), configs, seeds, config, jobs=_jobs(args), overrides=ov)
    write_grid_csv(report, paths["grid.csv"])
    write_json(report.summary(), paths["summary.json"])
    _print_grid(report)
    print(f"{len(report.cells)} runs, {len(report.rows)} rows -> {paths['grid.csv']}")
    if not report.complete:
        print("partial grid: some cells diverged (see grid.csv status column)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_denoise(args) -> int:
    spec = _scenario(args.scenario, args.seed)
    ov = _overrides(args)
    if ov:
        spec = with_dynamics(spec, **ov)
    try:
        levels = [float(x) for x in _split(args.levels)]
    except ValueError:
        raise UsageError(f"bad noise levels {args.levels!r}") from None
    seeds = parse_seeds(args.seeds)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    paths = _prepare(args.out, ["config.json", "traces.csv", "summary.json"], args.force)
    write_json(
        {"command": "denoise", "scenario": spec.name, "seed": spec.seed, "levels": levels, "seeds": seeds,
         "steps": args.steps, "dynamics": spec.dynamics.to_dict()},
        paths["config.json"],
    )
    report = run_denoising(spec, levels, seeds, steps=args.steps)
    write_denoising_csv(report, paths["traces.csv"])
    write_json(report.summary(), paths["summary.json"])
    print(f"certified bound {report.bound:.6g}, rate {report.rate:.6g}")
    for t in report.traces:
        print(
            f"level {t.noise_level:g} seed {t.seed}: d0={t.distances[0]:.6g} "
            f"d{args.steps}={t.distances[-1]:.3e} empirical rate={t.empirical_rate:.6g} "
            f"bounded={str(t.bound_holds).lower()}"
        )
    return EXIT_OK if report.all_bounded else EXIT_NOT_CONVERGED


def cmd_check(args) -> int:
    w = read_weights(args.path)
    cert = contraction_certificate(WeightSystem.from_initial(w), steepness=args.steepness, anchor=not args.no_anchor)
    print(f"operator norm {cert.operator_norm:.6g}")
    print(f"bound {cert.bound:.6g}")
    print(f"contractive {str(cert.contractive).lower()}")
    if not cert.power_converged:
        print(f"power iteration did not converge in {cert.power_iters} iterations", file=sys.stderr)
    return EXIT_OK if cert.contractive else EXIT_NOT_CONVERGED


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "denoise": cmd_denoise,
    "check": cmd_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = contextlib.redirect_stdout(io.StringIO()) if args.quiet else contextlib.nullcontext()
    try:
        with quiet:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"afcm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"afcm: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NoConvergenceError, PreconditionError) as exc:
        print(f"afcm: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (OSError, SchemaError) as exc:
        print(f"afcm: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"afcm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
