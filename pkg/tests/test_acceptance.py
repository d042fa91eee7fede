"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line that the conftest
hook prints in the terminal summary.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from attractor_fcm.core import DynamicsConfig, WeightSystem, iterate_attractor
from attractor_fcm.harness import (
    ABLATION_NAMES,
    default_jobs,
    run_ablation,
    run_comparison,
    write_grid_csv,
)
from attractor_fcm.learning import LearnerConfig, bptt_gradient, train_jgd
from attractor_fcm.scenarios import ALL_KINDS, STRESS_KINDS, gen_stress, generate
from attractor_fcm.solver import (
    contraction_certificate,
    denoising_trace,
    effective_rate,
    jacobian,
    newton_fixed_point,
    residual,
)

from oracles import contractive_weights, fd_gradient, fd_jacobian

SEEDS = list(range(1, 11))
ABLATION_SEEDS = [1, 2, 3]
BENCH_LEARNERS = ["jgd", "gd", "simple", "hebbian"]


@contextmanager
def criterion(record_property, number, title):
    info = {}
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).splitlines()[0][:160] if str(exc) else type(exc).__name__
        line = f"criterion {number}: FAIL {title} ({msg})"
        record_property("criterion", line)
        print(line)
        raise
    detail = f" ({info['detail']})" if info.get("detail") else ""
    line = f"criterion {number}: PASS {title}{detail}"
    record_property("criterion", line)
    print(line)


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bench():
    return timed(
        run_comparison, STRESS_KINDS, BENCH_LEARNERS, SEEDS, jobs=default_jobs(), keep_results=True
    )


@pytest.fixture(scope="module")
def ablation():
    return timed(
        run_ablation, ALL_KINDS, ABLATION_NAMES, ABLATION_SEEDS, jobs=default_jobs(), keep_results=True
    )


@pytest.fixture(scope="module")
def mask_runs():
    out = {}
    for kind in ALL_KINDS:
        spec = generate(kind, 1)
        out[kind] = (spec, *timed(train_jgd, spec, LearnerConfig(epochs=200)))
    return out


def test_01_gradient_matches_finite_differences(record_property):
    with criterion(record_property, 1, "BPTT gradient vs central differences") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for i, (n, T) in enumerate([(2, 1), (4, 3), (8, 5), (2, 5), (8, 1)]):
            rng = np.random.default_rng(100 + i)
            w = rng.uniform(-1, 1, (n, n))
            h0, target = rng.random(n), rng.random(n)
            dyn = DynamicsConfig(use_mask=False)
            grad, _ = bptt_gradient(h0, target, WeightSystem.from_initial(w), LearnerConfig(unroll_T=T, dynamics=dyn))
            fd = fd_gradient(h0, target, w, T, eps=1e-5, alpha=dyn.alpha)
            rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)
            worst = max(worst, float(rel.max()))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-4, f"max relative error {worst:.3g}"
        assert elapsed < 5.0, f"took {elapsed:.2f} s"
        info["detail"] = f"max rel err {worst:.2e}, {elapsed:.2f} s"


def test_02_jacobian_matches_finite_differences(record_property):
    with criterion(record_property, 2, "residual Jacobian vs finite differences") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for i, n in enumerate([1, 3, 5, 8, 5]):
            rng = np.random.default_rng(200 + i)
            ws = WeightSystem.from_initial(rng.uniform(-2, 2, (n, n)))
            h = rng.random(n)
            fd = fd_jacobian(lambda x: residual(x, ws), h, eps=1e-6)
            worst = max(worst, float(np.max(np.abs(jacobian(h, ws) - fd))))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-6, f"max abs error {worst:.3g}"
        assert elapsed < 1.0, f"took {elapsed:.2f} s"
        info["detail"] = f"max abs err {worst:.2e}, {elapsed:.3f} s"


def test_03_newton_agrees_with_iteration(record_property):
    with criterion(record_property, 3, "Newton vs forward iteration on contractive n=20") as info:
        t0 = time.perf_counter()
        worst, most_iters = 0.0, 0
        dyn = DynamicsConfig(alpha=1.0)
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            ws = WeightSystem.from_initial(contractive_weights(rng, 20))
            assert contraction_certificate(ws).contractive
            h0 = rng.random(20)
            fp = newton_fixed_point(h0, ws, dynamics=dyn)
            it, _, ok = iterate_attractor(h0, ws, dyn, max_steps=5000, tol=1e-12)
            assert ok and fp.method == "newton"
            worst = max(worst, float(np.max(np.abs(fp.h_star - it))))
            most_iters = max(most_iters, fp.iters)
        elapsed = time.perf_counter() - t0
        assert worst < 1e-6, f"max disagreement {worst:.3g}"
        assert most_iters <= 20, f"{most_iters} Newton iterations"
        assert elapsed < 1.0, f"took {elapsed:.2f} s"
        info["detail"] = f"max diff {worst:.2e}, max iters {most_iters}, {elapsed:.3f} s"


def test_04_denoising_bound(record_property):
    with criterion(record_property, 4, "S3 denoising stays under the certified rate") as info:
        t0 = time.perf_counter()
        worst_ratio, worst_gap = 0.0, -np.inf
        for seed in SEEDS:
            spec = gen_stress("S3", seed)
            ws = spec.weights()
            cert = contraction_certificate(ws, spec.dynamics.steepness, spec.dynamics.use_anchor)
            assert cert.contractive
            rate = effective_rate(cert, spec.dynamics)
            assert np.linalg.norm(spec.noise) == pytest.approx(0.5, abs=1e-12)
            d = denoising_trace(spec.h_target, spec.noise, ws, spec.dynamics, 50)
            gap = float(np.max(d[1:] - (rate * d[:-1] + 1e-12)))
            worst_gap = max(worst_gap, gap)
            worst_ratio = max(worst_ratio, float(d[50] / d[0]))
            assert gap <= 0.0, f"seed {seed}: step bound exceeded by {gap:.3g}"
            assert d[50] < 1e-3 * d[0], f"seed {seed}: d_50/d_0 = {d[50] / d[0]:.3g}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 2.0, f"took {elapsed:.2f} s"
        info["detail"] = f"worst d50/d0 {worst_ratio:.2e}, {elapsed:.3f} s"


def test_05_mask_conservation(record_property, mask_runs):
    with criterion(record_property, 5, "masked entries exactly zero after 200 J-GD epochs") as info:
        slowest = 0.0
        for kind, (spec, res, elapsed) in mask_runs.items():
            w = res.final_weights.w
            hole = ~res.final_weights.mask
            assert np.array_equal(res.final_weights.mask, spec.w_initial != 0)
            assert np.all(w[hole] == 0.0), f"{kind}: nonzero masked entry"
            assert len(res.history) == 200
            assert elapsed < 5.0, f"{kind} took {elapsed:.2f} s"
            slowest = max(slowest, elapsed)
        info["detail"] = f"{len(mask_runs)} scenarios, slowest {slowest:.2f} s"


def _all_results(bench, ablation, mask_runs):
    out = [c.result for c in bench[0].cells if c.result is not None]
    out += [c.result for c in ablation[0].cells if c.result is not None]
    out += [res for _, res, _ in mask_runs.values()]
    return out


def test_06_reward_gate_monotone(record_property, bench):
    with criterion(record_property, 6, "accepted rewards strictly increase") as info:
        report, _ = bench
        n_acc = 0
        assert all(c.status == "ok" for c in report.cells)
        for c in report.cells:
            rewards = [r.reward for r in c.result.history if r.accepted]
            n_acc += len(rewards)
            assert all(b > a for a, b in zip(rewards, rewards[1:])), f"{c.scenario}/{c.label}/{c.seed}"
        info["detail"] = f"{len(report.cells)} runs, {n_acc} accepted epochs"


def test_07_adaptive_scale_bounds(record_property, bench, ablation, mask_runs):
    with criterion(record_property, 7, "every recorded lambda_a in [0.5, 2.0]") as info:
        lams = np.array([r.lambda_a for res in _all_results(bench, ablation, mask_runs) for r in res.history])
        assert lams.size > 0
        assert np.all((lams >= 0.5) & (lams <= 2.0)), f"range [{lams.min()}, {lams.max()}]"
        info["detail"] = f"{lams.size} records, range [{lams.min():.3f}, {lams.max():.3f}]"


def test_08_benchmark_ordering(record_property, bench):
    with criterion(record_property, 8, "J-GD < 0.1 and 10x below Simple and Hebbian on S1-S4") as info:
        report, elapsed = bench
        parts = []
        for sc in STRESS_KINDS:
            jgd = report.row(sc, "jgd").mean
            simple, hebb = report.row(sc, "simple").mean, report.row(sc, "hebbian").mean
            parts.append(f"{sc} {jgd:.2g}/{simple:.2g}/{hebb:.2g}")
            assert jgd < 0.1, f"{sc}: J-GD mean {jgd:.4g}"
            assert 10 * jgd <= simple, f"{sc}: J-GD {jgd:.4g} vs Simple {simple:.4g}"
            assert 10 * jgd <= hebb, f"{sc}: J-GD {jgd:.4g} vs Hebbian {hebb:.4g}"
        assert elapsed < 60.0, f"grid took {elapsed:.1f} s"
        info["detail"] = f"jgd/simple/hebbian {', '.join(parts)}; {elapsed:.1f} s"


def test_09_ablation_grid(record_property, ablation):
    with criterion(record_property, 9, "91-row ablation, Simple FCM worse than Full J-GD on S1-S4") as info:
        report, elapsed = ablation
        assert len(report.rows) == 91
        assert report.complete, "missing cells"
        assert all(r.seeds == tuple(ABLATION_SEEDS) for r in report.rows)
        for sc in STRESS_KINDS:
            full, simple = report.row(sc, "Full J-GD").mean, report.row(sc, "Simple FCM").mean
            assert simple > full, f"{sc}: Simple {simple:.4g} <= Full {full:.4g}"
        assert elapsed < 300.0, f"grid took {elapsed:.1f} s"
        info["detail"] = f"{len(report.cells)} cells, {elapsed:.1f} s"


def test_10_determinism(record_property, bench, tmp_path):
    with criterion(record_property, 10, "repeated benchmark grid gives identical CSV bytes") as info:
        first, _ = bench
        again = run_comparison(STRESS_KINDS, BENCH_LEARNERS, SEEDS, jobs=default_jobs())
        write_grid_csv(first, tmp_path / "a.csv")
        write_grid_csv(again, tmp_path / "b.csv")
        a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
        assert a == b, "grid CSVs differ"
        info["detail"] = f"{len(a)} bytes"
