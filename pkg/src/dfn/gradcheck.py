"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each input element nudged by +/-epsilon (the
    tensors are perturbed in place and restored). The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. With ``max_elements`` set,
    a seeded random subset of each input's elements is checked.
    """
    for t in inputs:
        t.grad = None
    out = f()
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f().item()
            flat[i] = orig - epsilon
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
