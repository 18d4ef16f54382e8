"""Adaptive-moment optimizer and gradient utilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, TrainingError


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: OptimizerState, params: dict, grads: dict):
    """Bias-corrected adaptive-moment step; mutates params/state in place.

    ``params`` and ``grads`` are name -> float64 array dicts with matching
    shapes. Returns (params, state) for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
