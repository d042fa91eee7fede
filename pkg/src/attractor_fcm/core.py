"""State/weight data model and the forward attractor map.

States are plain 1-D float arrays treated as row vectors, so one step of the
map computes ``h @ w`` (left multiplication). The anchor adds ``h`` inside the
squashing function, which is the same as propagating through ``w + I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import DimensionError, DivergenceError, InvariantError

EXP_CLAMP = 500.0

Activation = Literal["sigmoid", "tanh"]


@dataclass(frozen=True)
class DynamicsConfig:
    alpha: float = 0.5
    use_anchor: bool = True
    use_residual: bool = True
    use_mask: bool = True
    steepness: float = 1.0
    activation: Activation = "sigmoid"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvariantError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.steepness > 0.0:
            raise InvariantError(f"steepness must be positive, got {self.steepness}")
        if self.activation not in ("sigmoid", "tanh"):
            raise InvariantError(f"unknown activation {self.activation!r}")

    @property
    def mix(self) -> float:
        """Mixing weight actually applied to the squashed term."""
        return self.alpha if self.use_residual else 1.0

    def with_toggles(self, **kw) -> "DynamicsConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "use_anchor": self.use_anchor,
            "use_residual": self.use_residual,
            "use_mask": self.use_mask,
            "steepness": self.steepness,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        return cls(**d)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WeightSystem:
    """Weight matrix plus the structural mask and sign pattern it started from.

    ``mask`` and ``sign`` are frozen at construction time; learners produce new
    instances through :meth:`with_weights` so the pattern travels with them.
    """

    w: np.ndarray
    mask: np.ndarray
    sign: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"weight matrix must be square, got shape {w.shape}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != w.shape:
            raise DimensionError(f"mask shape {mask.shape} != weight shape {w.shape}")
        sign = self.sign
        if sign is None:
            sign = np.sign(w)
        sign = np.asarray(sign, dtype=float)
        if sign.shape != w.shape:
            raise DimensionError(f"sign shape {sign.shape} != weight shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvariantError("weight matrix contains non-finite entries")
        object.__setattr__(self, "w", _readonly(w))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "sign", _readonly(sign))

    @classmethod
    def from_initial(cls, w_initial) -> "WeightSystem":
        """Derive mask (nonzero pattern) and sign from the expert weights."""
        w0 = np.asarray(w_initial, dtype=float)
        return cls(w=w0, mask=w0 != 0.0, sign=np.sign(w0))

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def with_weights(self, w) -> "WeightSystem":
        return WeightSystem(w=w, mask=self.mask, sign=self.sign)

    def respects_mask(self) -> bool:
        return bool(np.all(self.w[~self.mask] == 0.0))

    def __eq__(self, other):
        if not isinstance(other, WeightSystem):
            return NotImplemented
        return (
            np.array_equal(self.w, other.w)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.sign, other.sign)
        )

    __hash__ = None


def as_state(h, n: int | None = None) -> np.ndarray:
    """Validate and copy a concept-state vector."""
    h = np.array(h, dtype=float, copy=True)
    if h.ndim != 1:
        raise DimensionError(f"state must be a vector, got shape {h.shape}")
    if n is not None and h.shape[0] != n:
        raise DimensionError(f"state has length {h.shape[0]}, expected {n}")
    if not np.all(np.isfinite(h)):
        raise InvariantError("state contains non-finite entries")
    return h


def activation(z, config: DynamicsConfig):
    """Squashing function; sigmoid saturates instead of overflowing."""
    if config.activation == "tanh":
        return np.tanh(z)
    x = np.clip(config.steepness * np.asarray(z, dtype=float), -EXP_CLAMP, EXP_CLAMP)
    out = 1.0 / (1.0 + np.exp(-x))
    return out if out.ndim else float(out)


def activation_derivative(z, config: DynamicsConfig):
    if config.activation == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    s = activation(z, config)
    return config.steepness * s * (1.0 - s)


def propagation_matrix(weights: WeightSystem, config: DynamicsConfig) -> np.ndarray:
    """``W + I`` when the anchor is on, ``W`` otherwise."""
    if config.use_anchor:
        return weights.w + np.eye(weights.n)
    return weights.w


def _check(h: np.ndarray, weights: WeightSystem, config: DynamicsConfig) -> None:
    if h.ndim != 1 or h.shape[0] != weights.n:
        raise DimensionError(f"state of shape {h.shape} does not match n={weights.n}")
    if config.use_mask and not weights.respects_mask():
        raise InvariantError("weights have nonzero entries outside the structural mask")


def phi_step(h, weights: WeightSystem, config: DynamicsConfig) -> np.ndarray:
    """One step ``(1 - a) h + a * f(h W [+ h])`` of the attractor map."""
    h = np.asarray(h, dtype=float)
    _check(h, weights, config)
    pre = h @ weights.w
    if config.use_anchor:
        pre = pre + h
    squashed = activation(pre, config)
    a = config.mix
    if a == 1.0:
        return squashed
    return (1.0 - a) * h + a * squashed


def iterate_attractor(
    h0,
    weights: WeightSystem,
    config: DynamicsConfig,
    max_steps: int = 500,
    tol: float = 1e-6,
) -> tuple[np.ndarray, int, bool]:
    """Apply :func:`phi_step` until successive states differ by less than ``tol``.

    Returns the final state, the number of steps applied and whether the
    tolerance was met.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    h = as_state(h0, weights.n)
    for step in range(1, max_steps + 1):
        nxt = phi_step(h, weights, config)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite state at step {step}", step=step)
        delta = float(np.linalg.norm(nxt - h))
        h = nxt
        if delta < tol:
            return h, step, True
    return h, max_steps, False


def unroll(h0, weights: WeightSystem, config: DynamicsConfig, steps: int) -> np.ndarray:
    """Exactly ``steps`` applications of the map (no early stopping)."""
    h = np.asarray(h0, dtype=float)
    for step in range(1, steps + 1):
        h = phi_step(h, weights, config)
        if not np.all(np.isfinite(h)):
            raise DivergenceError(f"non-finite state at step {step}", step=step)
    return h


def apply_mask(weights: WeightSystem) -> WeightSystem:
    # np.where gives +0.0 at masked entries, never -0.0 or nan*0
    return weights.with_weights(np.where(weights.mask, weights.w, 0.0))
