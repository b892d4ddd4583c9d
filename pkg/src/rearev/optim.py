from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PoisonedGradientError(FloatingPointError):
    """Raised when a gradient contains NaN/Inf; the step is not applied."""


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise PoisonedGradientError(f"non-finite gradient for {name!r}")

    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a name -> array mapping that it updates in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)
