"""Newton solve of the self-consistency equation and the contraction check.

The fixed point satisfies ``h = f(h (W + I))``. With row-vector states the
Jacobian of the residual is stored as ``J[i, j] = dF_j / dh_i``, so a Newton
correction ``d`` solves ``d @ J = -F``, i.e. ``J.T @ d = -F``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .core import (
    DynamicsConfig,
    WeightSystem,
    activation,
    activation_derivative,
    as_state,
    phi_step,
    propagation_matrix,
)
from .errors import InvariantError, NoConvergenceError, PreconditionError

# plain squashed map used for the fixed-point equation: no residual mixing
_FIXED_POINT_DYNAMICS = DynamicsConfig(alpha=1.0, use_residual=False, use_mask=False)

MAX_HALVINGS = 8


@dataclass(frozen=True)
class NewtonConfig:
    epsilon: float = 1e-8
    max_iters: int = 50
    damping: float = 1.0
    fallback_steps: int = 2000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvariantError("epsilon must be positive")
        if self.max_iters < 1:
            raise InvariantError("max_iters must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise InvariantError("damping must lie in (0, 1]")
        if self.fallback_steps < 0:
            raise InvariantError("fallback_steps must be >= 0")


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    h_star: np.ndarray
    residual_norm: float
    iters: int
    method: Literal["newton", "fallback_iteration"]
    residual_history: tuple = ()


@dataclass(frozen=True)
class ContractionCertificate:
    operator_norm: float
    bound: float
    contractive: bool
    rate: float | None
    power_converged: bool = True
    power_iters: int = 0

    def to_dict(self) -> dict:
        return {
            "operator_norm": self.operator_norm,
            "bound": self.bound,
            "contractive": self.contractive,
            "rate": self.rate,
            "power_converged": self.power_converged,
            "power_iters": self.power_iters,
        }


def _fp_config(config: DynamicsConfig | None) -> DynamicsConfig:
    if config is None:
        return _FIXED_POINT_DYNAMICS
    return replace(config, alpha=1.0, use_residual=False, use_mask=False)


def residual(h, weights: WeightSystem, config: DynamicsConfig | None = None) -> np.ndarray:
    """``f(h (W + I)) - h``; the anchor and steepness follow ``config``."""
    cfg = _fp_config(config)
    h = as_state(h, weights.n)
    return activation(h @ propagation_matrix(weights, cfg), cfg) - h


def jacobian(h, weights: WeightSystem, config: DynamicsConfig | None = None) -> np.ndarray:
    cfg = _fp_config(config)
    h = as_state(h, weights.n)
    a = propagation_matrix(weights, cfg)
    d = activation_derivative(h @ a, cfg)
    return a * d[np.newaxis, :] - np.eye(weights.n)


def _forward_fallback(h, weights, cfg, steps, eps):
    best_h, best_r = h, float(np.linalg.norm(residual(h, weights, cfg)))
    for k in range(1, steps + 1):
        h = phi_step(h, weights, cfg)
        if not np.all(np.isfinite(h)):
            break
        r = float(np.linalg.norm(residual(h, weights, cfg)))
        if r < best_r:
            best_h, best_r = h, r
        if r < eps:
            return h, r, k
    return best_h, best_r, None


def newton_fixed_point(
    h0,
    weights: WeightSystem,
    config: NewtonConfig | None = None,
    dynamics: DynamicsConfig | None = None,
) -> FixedPointResult:
    """Damped Newton iteration for the attractor's fixed point.

    A step that increases the residual norm is halved up to eight times.
    A singular Jacobian or a non-finite iterate switches to plain forward
    iteration of the map for ``fallback_steps`` steps.

    Raises
    ------
    NoConvergenceError
        If neither route brings the residual norm below ``epsilon``.
    """
    config = config or NewtonConfig()
    cfg = _fp_config(dynamics)
    h = as_state(h0, weights.n)
    f = residual(h, weights, cfg)
    r = float(np.linalg.norm(f))
    history = [r]
    best_h, best_r = h, r
    iters = 0
    failed = False
    while r >= config.epsilon:
        if iters >= config.max_iters:
            failed = True
            break
        try:
            step = np.linalg.solve(jacobian(h, weights, cfg).T, -f)
        except np.linalg.LinAlgError:
            failed = True
            break
        if not np.all(np.isfinite(step)):
            failed = True
            break
        scale = config.damping
        for _ in range(MAX_HALVINGS + 1):
            cand = h + scale * step
            f_cand = residual(cand, weights, cfg) if np.all(np.isfinite(cand)) else None
            if f_cand is not None and float(np.linalg.norm(f_cand)) <= r:
                break
            scale *= 0.5
        if f_cand is None:
            failed = True
            break
        iters += 1
        h, f = cand, f_cand
        r = float(np.linalg.norm(f))
        history.append(r)
        if r < best_r:
            best_h, best_r = h, r

    if not failed:
        return FixedPointResult(h, r, iters, "newton", tuple(history))

    h_fb, r_fb, k = _forward_fallback(best_h, weights, cfg, config.fallback_steps, config.epsilon)
    if k is not None:
        return FixedPointResult(h_fb, r_fb, iters + k, "fallback_iteration", tuple(history))
    if r_fb < best_r:
        best_h, best_r = h_fb, r_fb
    raise NoConvergenceError(
        f"no fixed point within epsilon={config.epsilon:g}; best residual {best_r:.3e}",
        best_residual=best_r,
        best_state=best_h,
    )


def spectral_norm(a: np.ndarray, tol: float = 1e-10, max_iter: int = 10000) -> tuple[float, bool, int]:
    """Largest singular value by power iteration on ``a.T @ a``.

    Returns ``(estimate, converged, iterations)``; without convergence the
    estimate is still a valid lower bound.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[1]
    gram = a.T @ a
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        u = gram @ v
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            return 0.0, True, it
        v = u / nu
        new = float(np.sqrt(v @ gram @ v))
        if abs(new - est) <= tol * max(new, 1.0):
            return new, True, it
        est = new
    return est, False, max_iter


def contraction_certificate(
    weights: WeightSystem, steepness: float = 1.0, anchor: bool = True
) -> ContractionCertificate:
    if not steepness > 0:
        raise PreconditionError("steepness must be positive")
    a = weights.w + np.eye(weights.n) if anchor else weights.w
    norm, ok, iters = spectral_norm(a)
    bound = steepness / 4.0 * norm
    contractive = ok and bound < 1.0
    return ContractionCertificate(
        operator_norm=norm,
        bound=bound,
        contractive=contractive,
        rate=bound if contractive else None,
        power_converged=ok,
        power_iters=iters,
    )


def effective_rate(cert: ContractionCertificate, config: DynamicsConfig) -> float:
    """Contraction factor of the mixed map ``(1 - a) h + a f(.)``."""
    if cert.rate is None:
        raise PreconditionError("certificate is not contractive")
    a = config.mix
    return (1.0 - a) + a * cert.rate


def denoising_trace(
    h_clean,
    noise,
    weights: WeightSystem,
    config: DynamicsConfig,
    steps: int,
    fixed_point_tol: float = 1e-8,
) -> np.ndarray:
    """Distances ``||h_t - h_clean||`` for ``t = 0..steps`` starting from ``h_clean + noise``."""
    h_clean = as_state(h_clean, weights.n)
    noise = as_state(noise, weights.n)
    gap = float(np.linalg.norm(phi_step(h_clean, weights, config) - h_clean))
    if gap > fixed_point_tol:
        raise PreconditionError(
            f"clean state is not a fixed point of the dynamics (step moves it by {gap:.3e})"
        )
    out = np.empty(steps + 1)
    h = h_clean + noise
    out[0] = np.linalg.norm(h - h_clean)
    for t in range(1, steps + 1):
        h = phi_step(h, weights, config)
        out[t] = np.linalg.norm(h - h_clean)
    return out
