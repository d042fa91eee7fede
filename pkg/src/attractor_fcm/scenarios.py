"""Seeded scenario generators and the scenario file format.

Every generated scenario is a pure function of ``(GENERATOR_VERSION, kind,
seed)``. Weight matrices are drawn inside signed block templates, one block
per pair of concept groups, so narrative structure ("predators suppress
herbivores") survives while magnitudes stay random.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DynamicsConfig, WeightSystem, iterate_attractor
from .errors import DimensionError, InvariantError, SchemaError
from .solver import NewtonConfig, contraction_certificate, newton_fixed_point

GENERATOR_VERSION = "afcm-gen/1"
FILE_FORMAT = "attractor-fcm-scenario/1"

STRESS_KINDS = ("S1", "S2", "S3", "S4")
QUALITATIVE_KINDS = ("Q1", "Q2", "Q3")
ALL_KINDS = STRESS_KINDS + QUALITATIVE_KINDS

_KIND_CODES = {"S1": 1, "S2": 2, "S3": 3, "S4": 4, "Q1": 11, "Q2": 12, "Q3": 13}

STRESS_N = 20
S3_NOISE_NORM = 0.5
S3_TARGET_BOUND = 0.5


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    name: str
    n: int
    groups: tuple
    w_initial: np.ndarray
    h0: np.ndarray
    h_target: np.ndarray
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    noise: np.ndarray | None = None
    tags: tuple = ()
    seed: int = 0
    generator_version: str = GENERATOR_VERSION
    allow_self_loops: bool = False

    def __post_init__(self):
        n = int(self.n)
        object.__setattr__(self, "n", n)
        w = np.array(self.w_initial, dtype=float)
        if w.shape != (n, n):
            raise DimensionError(f"w_initial has shape {w.shape}, expected ({n}, {n})")
        for name in ("h0", "h_target"):
            v = np.array(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise DimensionError(f"{name} has length {v.shape}, expected {n}")
            lo = -1.0 if self.dynamics.activation == "tanh" else 0.0
            if not np.all(np.isfinite(v)) or np.any(v < lo) or np.any(v > 1.0):
                raise InvariantError(f"{name} entries must lie in [{lo:g}, 1]")
            object.__setattr__(self, name, v)
        if self.noise is not None:
            v = np.array(self.noise, dtype=float)
            if v.shape != (n,):
                raise DimensionError(f"noise has length {v.shape}, expected {n}")
            object.__setattr__(self, "noise", v)
        if not np.all(np.isfinite(w)):
            raise InvariantError("w_initial contains non-finite entries")
        if not self.allow_self_loops and np.any(np.diag(w) != 0.0):
            raise InvariantError("w_initial has self-loops; set allow_self_loops to keep them")
        object.__setattr__(self, "w_initial", w)
        groups = tuple((str(g[0]), int(g[1]), int(g[2])) for g in self.groups)
        _check_partition(groups, n)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "tags", tuple(self.tags))

    def weights(self) -> WeightSystem:
        return WeightSystem.from_initial(self.w_initial)

    def group_slice(self, label: str) -> slice:
        for lab, start, stop in self.groups:
            if lab == label:
                return slice(start, stop)
        raise KeyError(label)

    def __eq__(self, other):
        if not isinstance(other, ScenarioSpec):
            return NotImplemented
        return to_dict(self) == to_dict(other)

    __hash__ = None


def _check_partition(groups, n):
    covered = np.zeros(n, dtype=int)
    for label, start, stop in groups:
        if not 0 <= start < stop <= n:
            raise InvariantError(f"group {label!r} range [{start}, {stop}) outside [0, {n})")
        covered[start:stop] += 1
    if np.any(covered > 1):
        raise InvariantError(f"groups overlap at index {int(np.argmax(covered > 1))}")
    if np.any(covered == 0):
        raise InvariantError(f"groups leave index {int(np.argmin(covered))} uncovered")


def _rng(kind: str, seed: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([_KIND_CODES[kind], int(seed)])


def _block_weights(rng, sizes, template, lo=0.2, hi=0.8):
    """Fill an n x n matrix block by block.

    ``template[(a, b)] = (sign, density)`` describes edges from group ``a`` to
    group ``b``; ``sign`` is +1, -1 or 0 for mixed signs.
    """
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    w = np.zeros((n, n))
    for (a, b), (sign, density) in sorted(template.items()):
        rows = slice(offsets[a], offsets[a + 1])
        cols = slice(offsets[b], offsets[b + 1])
        shape = (sizes[a], sizes[b])
        mag = rng.uniform(lo, hi, size=shape)
        keep = rng.random(shape) < density
        s = rng.choice([-1.0, 1.0], size=shape) if sign == 0 else float(sign)
        w[rows, cols] = np.where(keep, s * mag, 0.0)
    np.fill_diagonal(w, 0.0)
    return w


def _ensure_inputs(rng, w, lo=0.2, hi=0.8):
    """Give every concept at least one incoming edge so it stays learnable under the mask."""
    n = w.shape[0]
    for j in range(n):
        if not np.any(w[:, j]):
            i = int(rng.integers(n - 1))
            i = i if i < j else i + 1
            w[i, j] = rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)
    return w


def _attractor(h0, w, dynamics):
    h, _, _ = iterate_attractor(h0, WeightSystem.from_initial(w), dynamics, max_steps=500, tol=1e-10)
    return h


# S4: two self-exciting communities with mutual inhibition, iterated without
# residual mixing. Intra-community weights are positive, cross weights negative.
S4_DYNAMICS = DynamicsConfig(alpha=1.0)
S4_INTRA = (0.1, 0.45)
S4_INTER = (0.2, 0.6)
S4_START = 0.8  # community A starts high, B low
S4_TARGET = 0.9  # target: A low (0.1), B high (0.9)
S4_SETTLE_STEPS = 30


def _two_basin_weights(rng, size_a, size_b, dyn):
    """Draw weights with an A-dominant and a B-dominant attractor.

    Draws are repeated until the jittered A-high start settles into the
    A-dominant attractor within ``S4_SETTLE_STEPS`` steps and the mirrored
    start settles into a B-dominant one.
    """
    n = size_a + size_b
    sizes = [size_a, size_b]
    high_a = np.concatenate([np.full(size_a, S4_START), np.full(size_b, 1.0 - S4_START)])
    high_b = 1.0 - high_a
    for _ in range(1000):
        w = _block_weights(rng, sizes, {(0, 0): (1, 0.5), (1, 1): (1, 0.5)}, lo=S4_INTRA[0], hi=S4_INTRA[1])
        w += _block_weights(rng, sizes, {(0, 1): (-1, 0.6), (1, 0): (-1, 0.6)}, lo=S4_INTER[0], hi=S4_INTER[1])
        w = _ensure_inputs(rng, w)
        h0 = high_a + rng.uniform(-0.05, 0.05, size=n)
        ws = WeightSystem.from_initial(w)
        fa, _, ok_a = iterate_attractor(h0, ws, dyn, max_steps=S4_SETTLE_STEPS, tol=1e-6)
        fb, _, ok_b = iterate_attractor(high_b, ws, dyn, max_steps=500, tol=1e-9)
        a_wins = fa[:size_a].mean() > 0.5 > fa[size_a:].mean()
        b_wins = fb[:size_a].mean() < 0.5 < fb[size_a:].mean()
        if ok_a and ok_b and a_wins and b_wins:
            return w, h0
    raise RuntimeError("no two-basin draw found")  # pragma: no cover


def gen_stress(kind: str, seed: int) -> ScenarioSpec:
    """Generate one of the four n=20 stress scenarios.

    S1 dense signed weights with a far target, S2 sparse weights with a
    target near the unforced attractor, S3 a contractive map started from a
    noisy copy of its fixed point, S4 two mutually inhibiting communities
    with the target in the basin the start state is not in.
    """
    if kind not in STRESS_KINDS:
        raise ValueError(f"unknown stress kind {kind!r}; expected one of {STRESS_KINDS}")
    rng = _rng(kind, seed)
    n = STRESS_N
    dyn = DynamicsConfig()
    groups = (("concepts", 0, n),)
    noise = None
    tags = ("stress",)

    if kind == "S1":
        w = rng.uniform(-1.0, 1.0, size=(n, n))
        np.fill_diagonal(w, 0.0)
        h0 = rng.uniform(0.2, 0.8, size=n)
        free = _attractor(h0, w, dyn)
        target = np.where(free > 0.5, 0.2, 0.8) + rng.uniform(-0.05, 0.05, size=n)
        tags += ("dense", "far-target")
    elif kind == "S2":
        w = _block_weights(rng, [n], {(0, 0): (0, 0.3)}, lo=0.0, hi=1.0)
        w = _ensure_inputs(rng, w)
        h0 = rng.uniform(0.2, 0.8, size=n)
        free = _attractor(h0, w, dyn)
        target = np.clip(free + rng.uniform(-0.15, 0.15, size=n), 0.05, 0.95)
        tags += ("reachable-target",)
    elif kind == "S3":
        dyn = DynamicsConfig(alpha=1.0)
        w = _block_weights(rng, [n], {(0, 0): (0, 0.3)}, lo=0.0, hi=1.0)
        w = _ensure_inputs(rng, w)
        while contraction_certificate(WeightSystem.from_initial(w)).bound > S3_TARGET_BOUND:
            w = 0.5 * w
        fp = newton_fixed_point(
            np.full(n, 0.5), WeightSystem.from_initial(w), NewtonConfig(epsilon=1e-13)
        ).h_star
        for _ in range(1000):
            u = rng.standard_normal(n)
            noise = S3_NOISE_NORM * u / np.linalg.norm(u)
            if np.all((fp + noise > 0.0) & (fp + noise < 1.0)):
                break
        else:  # pragma: no cover - fp sits near 0.66, far from the walls
            raise RuntimeError("could not place the noisy start inside (0, 1)")
        h0 = fp + noise
        target = fp
        tags += ("contractive", "denoising")
    else:
        half = n // 2
        groups = (("community_a", 0, half), ("community_b", half, n))
        dyn = S4_DYNAMICS
        w, h0 = _two_basin_weights(rng, half, n - half, dyn)
        target = np.concatenate([np.full(half, 1.0 - S4_TARGET), np.full(n - half, S4_TARGET)])
        tags += ("two-basin", "trap")

    return ScenarioSpec(
        name=kind,
        n=n,
        groups=groups,
        w_initial=w,
        h0=h0,
        h_target=target,
        dynamics=dyn,
        noise=noise,
        tags=tags,
        seed=int(seed),
    )


# (label, size, start level, target level) per group, then the signed block template
_QUALITATIVE = {
    "Q1": (
        [("oligarchs", 6, 0.6, 0.9), ("population", 44, 0.5, 0.1)],
        {
            (0, 0): (1, 0.5),
            (0, 1): (-1, 0.3),  # extraction
            (1, 0): (1, 0.3),  # wealth flows upward
            (1, 1): (0, 0.1),
        },
    ),
    "Q2": (
        [("apex", 4, 0.5, 0.3), ("herbivores", 13, 0.9, 0.1), ("producers", 24, 0.6, 0.7)],
        {
            (0, 0): (0, 0.3),
            (0, 1): (-1, 0.5),  # predation
            (1, 0): (1, 0.5),  # prey feeds predators
            (1, 1): (0, 0.1),
            (1, 2): (-1, 0.3),  # grazing
            (2, 1): (1, 0.3),  # forage
            (2, 2): (0, 0.1),
        },
    ),
    "Q3": (
        [("regime", 10, 0.5, 0.9), ("dissidents", 15, 0.9, 0.1), ("public", 26, 0.6, 0.2)],
        {
            (0, 0): (1, 0.4),
            (0, 1): (-1, 0.4),  # repression
            (0, 2): (-1, 0.3),
            (1, 0): (-1, 0.3),  # protest erodes the regime
            (1, 1): (1, 0.2),
            (1, 2): (1, 0.3),  # mobilisation
            (2, 1): (1, 0.2),
            (2, 2): (0, 0.1),
        },
    ),
}


def gen_qualitative(kind: str, seed: int) -> ScenarioSpec:
    """Generate Q1 (oligarchy, n=50), Q2 (trophic cascade, n=41) or Q3 (dictator, n=51)."""
    if kind not in QUALITATIVE_KINDS:
        raise ValueError(f"unknown qualitative kind {kind!r}; expected one of {QUALITATIVE_KINDS}")
    rng = _rng(kind, seed)
    layout, template = _QUALITATIVE[kind]
    sizes = [g[1] for g in layout]
    w = _ensure_inputs(rng, _block_weights(rng, sizes, template))
    groups, h0, target, start = [], [], [], 0
    for label, size, h_start, h_goal in layout:
        groups.append((label, start, start + size))
        h0.append(np.clip(h_start + rng.uniform(-0.05, 0.05, size=size), 0.01, 0.99))
        target.append(np.full(size, h_goal))
        start += size
    return ScenarioSpec(
        name=kind,
        n=start,
        groups=tuple(groups),
        w_initial=w,
        h0=np.concatenate(h0),
        h_target=np.concatenate(target),
        tags=("qualitative",),
        seed=int(seed),
    )


def generate(kind: str, seed: int) -> ScenarioSpec:
    if kind in STRESS_KINDS:
        return gen_stress(kind, seed)
    if kind in QUALITATIVE_KINDS:
        return gen_qualitative(kind, seed)
    raise ValueError(f"unknown scenario kind {kind!r}; expected one of {ALL_KINDS}")


# -- file format -------------------------------------------------------------


def to_dict(spec: ScenarioSpec) -> dict:
    return {
        "format": FILE_FORMAT,
        "generator_version": spec.generator_version,
        "seed": spec.seed,
        "name": spec.name,
        "n": spec.n,
        "groups": [{"label": g[0], "start": g[1], "stop": g[2]} for g in spec.groups],
        "dynamics": spec.dynamics.to_dict(),
        "tags": list(spec.tags),
        "allow_self_loops": spec.allow_self_loops,
        "h0": spec.h0.tolist(),
        "h_target": spec.h_target.tolist(),
        "noise": None if spec.noise is None else spec.noise.tolist(),
        "w_initial": spec.w_initial.tolist(),
    }


_REQUIRED = {
    "format": str,
    "generator_version": str,
    "seed": int,
    "name": str,
    "n": int,
    "groups": list,
    "dynamics": dict,
    "h0": list,
    "h_target": list,
    "w_initial": list,
}


def from_dict(data: dict) -> ScenarioSpec:
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    for key, typ in _REQUIRED.items():
        if key not in data:
            raise SchemaError("missing required field", field=key)
        val = data[key]
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise SchemaError("expected an integer", field=key)
        if not isinstance(val, typ):
            raise SchemaError(f"expected {typ.__name__}", field=key)
    if data["format"] != FILE_FORMAT:
        raise SchemaError(f"unsupported format {data['format']!r}", field="format")
    groups = []
    for i, g in enumerate(data["groups"]):
        try:
            groups.append((g["label"], int(g["start"]), int(g["stop"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed group entry {i}", field="groups") from exc
    try:
        dynamics = DynamicsConfig.from_dict(data["dynamics"])
    except TypeError as exc:
        raise SchemaError(str(exc), field="dynamics") from exc
    arrays = {}
    for key in ("w_initial", "h0", "h_target", "noise"):
        val = data.get(key)
        if val is None:
            arrays[key] = None
            continue
        try:
            arrays[key] = np.array(val, dtype=float)
        except (TypeError, ValueError) as exc:
            raise SchemaError("not a numeric array", field=key) from exc
    return ScenarioSpec(
        name=data["name"],
        n=data["n"],
        groups=tuple(groups),
        w_initial=arrays["w_initial"],
        h0=arrays["h0"],
        h_target=arrays["h_target"],
        dynamics=dynamics,
        noise=arrays["noise"],
        tags=tuple(data.get("tags", ())),
        seed=data["seed"],
        generator_version=data["generator_version"],
        allow_self_loops=bool(data.get("allow_self_loops", False)),
    )


def dumps(spec: ScenarioSpec) -> str:
    """JSON text with one matrix row per line; floats use shortest round-trip repr."""
    d = to_dict(spec)
    lines = ["{"]
    items = list(d.items())
    for k, (key, val) in enumerate(items):
        comma = "," if k < len(items) - 1 else ""
        if key == "w_initial":
            rows = [json.dumps(r) for r in val]
            body = ",\n    ".join(rows)
            lines.append(f'  "{key}": [\n    {body}\n  ]{comma}')
        else:
            lines.append(f"  {json.dumps(key)}: {json.dumps(val)}{comma}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_scenario(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(dumps(spec), encoding="utf-8")


def load_scenario(path) -> ScenarioSpec:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return from_dict(data)


def with_dynamics(spec: ScenarioSpec, **toggles) -> ScenarioSpec:
    return replace(spec, dynamics=replace(spec.dynamics, **toggles))
