"""Adam with bias correction, and global gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators and the step count."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-5):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: OptimizerState, lr):
    """Bias-corrected Adam update, in place on params. Returns state."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def clip_global_norm(grads, max_norm):
    """Scale grads so their global L2 norm is at most max_norm.

    Returns (grads, pre_clip_norm); grads are scaled in place when needed.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm
