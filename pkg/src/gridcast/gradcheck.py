"""Finite-difference verification of tape gradients.

Runs a parallel float64 path: 32-bit central differences are too noisy to
gate on the 1e-4 tolerance, so checks always promote inputs to float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def numerical_gradients(f: Callable[..., float], arrays: Sequence[np.ndarray],
                        step: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central finite differences of ``f`` w.r.t. each float64 array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*arrays)
            flat[i] = orig - step
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Element-wise |a - n| / max(|a|, |n|, 1); the floor makes near-zero
    gradients compare absolutely instead of blowing up."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    step: float = DEFAULT_STEP) -> float:
    """Compare tape gradients of ``build(*leaves)`` against finite differences.

    ``build`` must map leaf tensors to a scalar loss tensor using only taped
    operations. Returns the max relative error over all inputs.
    """
    arrays64 = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays64]
    tape = Tape()
    with tape:
        loss = build(*leaves)
    tape.backward(loss)

    def f(*ars: np.ndarray) -> float:
        return build(*[Tensor(a) for a in ars]).item()

    numeric = numerical_gradients(f, arrays64, step=step)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        worst = max(worst, max_relative_error(analytic, num))
    return worst
