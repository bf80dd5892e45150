from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DTensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[DTensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Moments are kept in float64. Returns the (possibly freshly created) state.
    """
    if state is None:
        state = AdamState()
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {i} with shape {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.dtype)
    return state
