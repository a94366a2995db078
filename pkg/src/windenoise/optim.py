"""Adam with bias correction, operating in place on named float32 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DTYPE, ShapeError


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the step was not applied."""


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls(
            m={k: np.zeros_like(p, dtype=DTYPE) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=DTYPE) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update. ``params`` and ``state`` are modified in place.

    All gradients are validated before anything is touched, so a rejected
    step leaves parameters and moments exactly as they were.
    """
    if set(grads) != set(params):
        raise ShapeError(f"gradient keys {sorted(grads)} do not match parameter keys {sorted(params)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name} at step {state.step + 1}")
    if not state.m:
        fresh = OptState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    step_size = DTYPE(lr / bc1)
    inv_bc2 = DTYPE(1.0 / bc2)
    b1, b2 = DTYPE(beta1), DTYPE(beta2)
    for name, p in params.items():
        g = grads[name].astype(DTYPE, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (DTYPE(1) - b1) * g
        v *= b2
        v += (DTYPE(1) - b2) * (g * g)
        p -= step_size * m / (np.sqrt(v * inv_bc2) + DTYPE(eps))
