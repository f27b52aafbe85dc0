"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-3) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
                    floor: float = 1e-6) -> float:
    """Return the max relative error between backward() and finite differences over ``inputs``.

    ``f`` must rebuild the graph from ``inputs`` on every call and return a scalar.
    """
    for x in inputs:
        x.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64) for x in inputs]
    worst = 0.0
    for x, a in zip(inputs, analytic):
        worst = max(worst, max_rel_error(a, numerical_grad(f, x, step), floor))
    return worst
