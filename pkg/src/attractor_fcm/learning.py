"""J-GD and the baseline learners (plain BPTT descent, delta-rule FCM, Hebbian).

All learners share the bookkeeping in :class:`EpochRecord`: ``error_norm``
is measured on the weights produced by that epoch, and ``accepted`` marks
epochs whose weights become the reported result. J-GD gates its weight
trajectory on the reward; the baselines update unconditionally and only the
reported result tracks their best epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import EXP_CLAMP, DynamicsConfig, WeightSystem
from .errors import DivergenceError, InvariantError, NoConvergenceError
from .scenarios import ScenarioSpec
from .solver import NewtonConfig, newton_fixed_point

SIMPLE_DYNAMICS = DynamicsConfig(
    alpha=1.0, use_anchor=False, use_residual=False, use_mask=False, activation="tanh"
)

LEARNERS = ("simple", "hebbian", "gd", "jgd")


@dataclass(frozen=True)
class LearnerConfig:
    eta: float = 0.05
    unroll_T: int = 30
    clip_lo: float = 0.5
    clip_hi: float = 2.0
    epochs: int = 200
    use_jgd: bool = True
    dynamics: DynamicsConfig | None = None
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    square_scale: bool = True
    hebbian_decay: float = 0.1
    goal_tol: float = 0.1

    def __post_init__(self):
        if not self.eta > 0:
            raise InvariantError("eta must be positive")
        if self.unroll_T < 1:
            raise InvariantError("unroll_T must be >= 1")
        if not 0 < self.clip_lo <= self.clip_hi:
            raise InvariantError("need 0 < clip_lo <= clip_hi")
        if self.epochs < 0:
            raise InvariantError("epochs must be >= 0")

    def resolved(self, scenario: ScenarioSpec) -> "LearnerConfig":
        """Fill in the scenario's dynamics unless the config overrides them."""
        if self.dynamics is not None:
            return self
        return replace(self, dynamics=scenario.dynamics)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "unroll_T": self.unroll_T,
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "epochs": self.epochs,
            "use_jgd": self.use_jgd,
            "dynamics": None if self.dynamics is None else self.dynamics.to_dict(),
            "newton": {
                "epsilon": self.newton.epsilon,
                "max_iters": self.newton.max_iters,
                "damping": self.newton.damping,
                "fallback_steps": self.newton.fallback_steps,
            },
            "square_scale": self.square_scale,
            "hebbian_decay": self.hebbian_decay,
            "goal_tol": self.goal_tol,
        }


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    error_norm: float
    reward: float
    lambda_a: float
    accepted: bool
    grad_norm: float
    note: str = ""


@dataclass(frozen=True, eq=False)
class TrainResult:
    learner: str
    final_weights: WeightSystem
    history: tuple
    final_error: float
    initial_error: float
    converged: bool

    @property
    def accepted_count(self) -> int:
        return sum(r.accepted for r in self.history)


@dataclass
class LearnerState:
    """Mutable per-run state threaded through :func:`jgd_epoch`."""

    ref_norm: float
    best_reward: float
    best_error: float
    eta: float


def reward(error_norm: float) -> float:
    return 2.0 * math.exp(-error_norm) - 1.0


# -- forward / backward through the unrolled map -----------------------------


def _squash(pre, dyn: DynamicsConfig):
    if dyn.activation == "tanh":
        s = np.tanh(pre)
        return s, 1.0 - s * s
    s = 1.0 / (1.0 + np.exp(-np.clip(dyn.steepness * pre, -EXP_CLAMP, EXP_CLAMP)))
    return s, dyn.steepness * s * (1.0 - s)


def _prop(w, dyn):
    return w + np.eye(w.shape[0]) if dyn.use_anchor else w


def _forward(h0, w, dyn: DynamicsConfig, steps: int, keep: bool = False):
    a = dyn.mix
    prop = _prop(w, dyn)
    h = np.asarray(h0, dtype=float)
    states, slopes = [h], []
    for t in range(steps):
        s, ds = _squash(h @ prop, dyn)
        h = s if a == 1.0 else (1.0 - a) * h + a * s
        if not np.all(np.isfinite(h)):
            raise DivergenceError(f"non-finite state at step {t + 1}", step=t + 1)
        if keep:
            states.append(h)
            slopes.append(ds)
    return h, states, slopes


def unrolled_state(h0, weights: WeightSystem, dyn: DynamicsConfig, steps: int) -> np.ndarray:
    return _forward(h0, weights.w, dyn, steps)[0]


def bptt_gradient(h0, target, weights: WeightSystem, config: LearnerConfig):
    """Gradient of ``0.5 * ||target - h_T||^2`` with respect to ``W``.

    Reverse accumulation through all ``unroll_T`` steps, including the
    residual mixing and anchor paths. Returns ``(grad, h_T)``; the gradient is
    dense even where the mask is zero.
    """
    dyn = config.dynamics or DynamicsConfig()
    w = weights.w
    h_T, states, slopes = _forward(h0, w, dyn, config.unroll_T, keep=True)
    a = dyn.mix
    g = h_T - np.asarray(target, dtype=float)
    grad = np.zeros_like(w)
    for t in range(config.unroll_T - 1, -1, -1):
        delta = a * g * slopes[t]
        grad += np.outer(states[t], delta)
        back = w @ delta
        if dyn.use_anchor:
            back = back + delta
        g = (1.0 - a) * g + back
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite adjoint at step {t}", step=t)
    return grad, h_T


def adaptive_scale(grad_norm: float, ref_norm: float, clip_lo: float = 0.5, clip_hi: float = 2.0) -> float:
    """Clipped ratio ``ref_norm / grad_norm``: steep landscapes shrink the step, flat ones grow it."""
    if ref_norm == 0.0:
        return float(min(max(1.0, clip_lo), clip_hi))
    if grad_norm == 0.0:
        return float(clip_hi)
    return float(np.clip(ref_norm / grad_norm, clip_lo, clip_hi))


# -- J-GD --------------------------------------------------------------------


def init_jgd_state(h0, target, weights: WeightSystem, config: LearnerConfig) -> LearnerState:
    """Reference gradient norm and starting reward, both taken at initialisation."""
    grad, h_T = bptt_gradient(h0, target, weights, config)
    err = float(np.linalg.norm(np.asarray(target) - h_T))
    return LearnerState(
        ref_norm=float(np.linalg.norm(grad)), best_reward=reward(err), best_error=err, eta=config.eta
    )


def jgd_update(h_star, target, lambda_a, eta, mask, square_scale=True, use_mask=True):
    """Masked outer-product weight perturbation built from the fixed point."""
    scaled = lambda_a * h_star if square_scale else h_star
    dw = eta * lambda_a * np.outer(scaled, np.asarray(target) - h_star)
    if use_mask:
        dw = np.where(mask, dw, 0.0)
    return dw


def jgd_epoch(h0, target, weights: WeightSystem, state: LearnerState, config: LearnerConfig, epoch: int = 0):
    """One J-GD epoch; returns ``(weights, record)`` and updates ``state`` in place.

    A rejected candidate leaves the weights untouched and halves the step for
    the next attempt; the next acceptance restores the configured rate.
    """
    dyn = config.dynamics or DynamicsConfig()
    target = np.asarray(target, dtype=float)
    grad, h_curr = bptt_gradient(h0, target, weights, config)
    grad_norm = float(np.linalg.norm(grad))
    lam = adaptive_scale(grad_norm, state.ref_norm, config.clip_lo, config.clip_hi)
    try:
        fp = newton_fixed_point(h_curr, weights, config.newton, dyn)
    except NoConvergenceError as exc:
        err = float(np.linalg.norm(target - h_curr))
        state.eta *= 0.5
        rec = EpochRecord(epoch, err, reward(err), lam, False, grad_norm, f"newton-failed: {exc}")
        return weights, rec

    dw = jgd_update(fp.h_star, target, lam, state.eta, weights.mask, config.square_scale, dyn.use_mask)
    w_new = weights.w + dw
    if dyn.use_mask:
        w_new = np.where(weights.mask, w_new, 0.0)
    candidate = weights.with_weights(w_new)
    h_T = unrolled_state(h0, candidate, dyn, config.unroll_T)
    err = float(np.linalg.norm(target - h_T))
    z = reward(err)
    if z > state.best_reward:
        state.best_reward = z
        state.best_error = err
        state.eta = config.eta
        return candidate, EpochRecord(epoch, err, z, lam, True, grad_norm)
    state.eta *= 0.5
    return weights, EpochRecord(epoch, err, z, lam, False, grad_norm)


def _finish(learner, weights, history, final_error, initial_error, config):
    failed = bool(history) and history[-1].note.startswith("newton-failed")
    return TrainResult(
        learner=learner,
        final_weights=weights,
        history=tuple(history),
        final_error=final_error,
        initial_error=initial_error,
        converged=final_error < config.goal_tol and not failed,
    )


def _tag_epoch(exc: DivergenceError, epoch: int) -> DivergenceError:
    exc.epoch = epoch
    return exc


def train_jgd(scenario: ScenarioSpec, config: LearnerConfig | None = None) -> TrainResult:
    config = (config or LearnerConfig()).resolved(scenario)
    if not config.use_jgd:
        return train_gd(scenario, config, masked=config.dynamics.use_mask)
    weights = scenario.weights()
    h0, target = scenario.h0, scenario.h_target
    state = init_jgd_state(h0, target, weights, config)
    initial_error = state.best_error
    history = []
    for epoch in range(config.epochs):
        try:
            weights, rec = jgd_epoch(h0, target, weights, state, config, epoch)
        except DivergenceError as exc:
            raise _tag_epoch(exc, epoch)
        history.append(rec)
    return _finish("jgd", weights, history, state.best_error, initial_error, config)


# -- baselines ---------------------------------------------------------------


class _BestTracker:
    """Keeps the best-so-far weights for learners without a reward gate."""

    def __init__(self, weights, error):
        self.weights = weights
        self.error = error
        self.reward = reward(error)

    def offer(self, weights, error) -> bool:
        z = reward(error)
        if z > self.reward:
            self.weights, self.error, self.reward = weights, error, z
            return True
        return False


def train_gd(
    scenario: ScenarioSpec, config: LearnerConfig | None = None, masked: bool = False
) -> TrainResult:
    """Plain BPTT gradient descent ``W <- W - eta * dL/dW``, no reward gate.

    The comparison baseline is unmasked: every entry may move, including
    structural zeros. ``masked=True`` keeps the structural mask (the
    ablation's non-J-GD paths with the mask switched on).
    """
    config = (config or LearnerConfig()).resolved(scenario)
    if not masked:
        config = replace(config, dynamics=replace(config.dynamics, use_mask=False))
    dyn = config.dynamics
    weights = scenario.weights()
    h0, target = scenario.h0, scenario.h_target
    initial_error = float(np.linalg.norm(target - unrolled_state(h0, weights, dyn, config.unroll_T)))
    best = _BestTracker(weights, initial_error)
    history = []
    for epoch in range(config.epochs):
        try:
            grad, _ = bptt_gradient(h0, target, weights, config)
            w_new = weights.w - config.eta * grad
            if masked:
                w_new = np.where(weights.mask, w_new, 0.0)
            weights = weights.with_weights(w_new)
            err = float(np.linalg.norm(target - unrolled_state(h0, weights, dyn, config.unroll_T)))
        except DivergenceError as exc:
            raise _tag_epoch(exc, epoch)
        accepted = best.offer(weights, err)
        history.append(EpochRecord(epoch, err, reward(err), 1.0, accepted, float(np.linalg.norm(grad))))
    return _finish("gd", best.weights, history, best.error, initial_error, config)


def train_simple(scenario: ScenarioSpec, config: LearnerConfig | None = None) -> TrainResult:
    """Delta-rule FCM: ``tanh`` dynamics and ``W <- W + eta * outer(h_T, E)``."""
    config = config or LearnerConfig()
    dyn = SIMPLE_DYNAMICS
    weights = WeightSystem.from_initial(scenario.w_initial)
    h0, target = scenario.h0, scenario.h_target
    T = config.unroll_T
    h_T = unrolled_state(h0, weights, dyn, T)
    initial_error = float(np.linalg.norm(target - h_T))
    best = _BestTracker(weights, initial_error)
    history = []
    for epoch in range(config.epochs):
        try:
            step = np.outer(h_T, target - h_T)
            weights = weights.with_weights(weights.w + config.eta * step)
            h_T = unrolled_state(h0, weights, dyn, T)
        except DivergenceError as exc:
            raise _tag_epoch(exc, epoch)
        err = float(np.linalg.norm(target - h_T))
        accepted = best.offer(weights, err)
        history.append(EpochRecord(epoch, err, reward(err), 1.0, accepted, float(np.linalg.norm(step))))
    return _finish("simple", best.weights, history, best.error, initial_error, config)


def hebbian_pass(h0, w, eta, decay, steps):
    """Run ``steps`` tanh steps under fixed ``w`` and apply the decaying correlational rule per step."""
    h = np.asarray(h0, dtype=float)
    traj = [h]
    for _ in range(steps):
        h = np.tanh(h @ w)
        traj.append(h)
    w = np.array(w, dtype=float)
    for t in range(steps):
        w = w + eta * (np.outer(traj[t], traj[t + 1]) - decay * w)
    return w, traj


def train_hebbian(scenario: ScenarioSpec, config: LearnerConfig | None = None) -> TrainResult:
    """Stand-in Hebbian baseline: ``dW = eta * (outer(h_t, h_{t+1}) - decay * W)``.

    No specific Hebbian rule is prescribed for this comparison, so this is a
    generic decaying correlational rule on the same tanh dynamics as the
    delta-rule baseline.
    """
    config = config or LearnerConfig()
    dyn = SIMPLE_DYNAMICS
    weights = WeightSystem.from_initial(scenario.w_initial)
    h0, target = scenario.h0, scenario.h_target
    T = config.unroll_T
    initial_error = float(np.linalg.norm(target - unrolled_state(h0, weights, dyn, T)))
    best = _BestTracker(weights, initial_error)
    history = []
    for epoch in range(config.epochs):
        w_new, _ = hebbian_pass(h0, weights.w, config.eta, config.hebbian_decay, T)
        if not np.all(np.isfinite(w_new)):
            raise DivergenceError("non-finite Hebbian weights", epoch=epoch)
        step_norm = float(np.linalg.norm(w_new - weights.w)) / config.eta
        weights = weights.with_weights(w_new)
        try:
            err = float(np.linalg.norm(target - unrolled_state(h0, weights, dyn, T)))
        except DivergenceError as exc:
            raise _tag_epoch(exc, epoch)
        accepted = best.offer(weights, err)
        history.append(EpochRecord(epoch, err, reward(err), 1.0, accepted, step_norm))
    return _finish("hebbian", best.weights, history, best.error, initial_error, config)


TRAINERS = {
    "simple": train_simple,
    "hebbian": train_hebbian,
    "gd": train_gd,
    "jgd": train_jgd,
}


def train(learner: str, scenario: ScenarioSpec, config: LearnerConfig | None = None) -> TrainResult:
    try:
        fn = TRAINERS[learner]
    except KeyError:
        raise ValueError(f"unknown learner {learner!r}; expected one of {LEARNERS}") from None
    return fn(scenario, config)
