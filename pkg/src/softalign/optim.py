"""Parameter updates: plain gradient step and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def _check(params, grads):
    for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
    if len(params.weights) != len(grads.weights):
        raise ShapeError("gradient depth does not match parameters")


def sgd_step(params, grads, lr: float):
    """In-place ``theta <- theta - lr * g``; returns ``params``."""
    _check(params, grads)
    for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
        p -= lr * g
    return params


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params, grads):
    """One Adam update, in place on both ``state`` and ``params``.

    Weight decay is decoupled: ``lr * weight_decay * theta`` is added to
    the step.
    """
    _check(params, grads)
    tensors = params.weights + params.biases
    gs = grads.weights + grads.biases
    if not state.m:
        state.m = [np.zeros_like(p) for p in tensors]
        state.v = [np.zeros_like(p) for p in tensors]
    elif [m.shape for m in state.m] != [p.shape for p in tensors]:
        raise ShapeError("Adam state does not match parameter shapes")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(tensors, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            step = step + state.weight_decay * p
        p -= state.lr * step
    return state, params
