"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DTensor, no_grad


def grad_check(
    f: Callable,
    x: DTensor | Sequence[DTensor],
    h: float = 1e-3,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is a tensor or a list of tensors; ``f`` receives it unchanged and
    must return a scalar DTensor. Everything is promoted to float64 first, so
    the caller's tensors are left untouched.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(x, DTensor)
    originals = [x] if single else list(x)
    xs = [DTensor(t.data.astype(np.float64), requires_grad=True) for t in originals]
    arg = xs[0] if single else xs

    loss = f(arg)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(arg).item()
                flat[i] = orig - h
                fm = f(arg).item()
                flat[i] = orig
                cd = (fp - fm) / (2.0 * h)
                a = float(gflat[i])
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
