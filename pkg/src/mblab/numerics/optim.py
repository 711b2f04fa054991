"""Adam with bias correction, plus the warm-up / inverse-sqrt schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> None:
    """Apply one Adam update in place.

    ``params`` maps names to :class:`Tensor` (or ndarray); ``grads`` maps the
    same names to gradient arrays. Names absent from ``grads`` are skipped,
    which is how frozen parameters stay bit-identical.
    """
    if state.t < 0:
        raise ContractError("adam_step: negative step counter")
    lr = state.learning_rate if lr is None else lr
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g, dtype=np.float64)
        if g.shape != data.shape:
            raise ContractError(f"adam_step: gradient {g.shape} vs parameter {data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def warmup_inverse_sqrt(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warm-up to ``peak_lr`` over ``warmup`` steps, then ~1/sqrt(step)."""
    step = max(step, 1)
    if warmup <= 0:
        return peak_lr
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))
