"""Adam and gradient accumulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters missing from ``grads`` are treated as having zero gradient (their
    moments still decay). Raises ``NumericError`` before touching anything if a
    gradient contains NaN or infinity.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.t + 1}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def accumulate_gradients(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[object], Tensor],
    micro_batches: Sequence,
    reduction: str = "mean",
) -> tuple[dict[str, np.ndarray], float]:
    """Run forward/backward on each micro-batch and combine the parameter gradients.

    ``loss_fn`` maps one micro-batch to a scalar loss Tensor. With
    ``reduction="mean"`` the summed gradients are divided by the number of
    micro-batches (mean of per-batch means), otherwise they are summed.
    Returns the combined gradients and the matching combined loss value.
    """
    if not micro_batches:
        raise ValueError("need at least one micro-batch")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    ref_shape = None
    for mb in micro_batches:
        shapes = _batch_shapes(mb)
        if any(s[0] == 0 for s in shapes if s):
            raise ValueError("empty micro-batch")
        tail = [s[1:] for s in shapes]
        if ref_shape is None:
            ref_shape = tail
        elif tail != ref_shape:
            raise ValueError(f"inconsistent micro-batch shapes: {ref_shape} vs {tail}")

    total: dict[str, np.ndarray] = {}
    loss_total = 0.0
    for mb in micro_batches:
        for p in params.values():
            p.zero_grad()
        loss = loss_fn(mb)
        loss.backward()
        loss_total += float(loss.data)
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            total[name] = g if name not in total else total[name] + g
    for p in params.values():
        p.zero_grad()
    if reduction == "mean":
        k = len(micro_batches)
        total = {n: g / k for n, g in total.items()}
        loss_total /= k
    return total, loss_total


def _batch_shapes(mb) -> list[tuple[int, ...]]:
    if isinstance(mb, np.ndarray):
        return [mb.shape]
    if isinstance(mb, Tensor):
        return [mb.shape]
    if isinstance(mb, (tuple, list)):
        out = []
        for item in mb:
            out.extend(_batch_shapes(item))
        return out
    if hasattr(mb, "shapes"):
        return list(mb.shapes())
    if hasattr(mb, "__len__"):
        return [(len(mb),)]
    return []


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
