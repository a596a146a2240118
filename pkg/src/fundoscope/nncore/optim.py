"""Momentum SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(network, grads, state: OptimizerState):
    """``v <- momentum * v - lr * g``; ``w <- w + v``. Updates ``network`` in place."""
    if len(grads) != len(network.params):
        raise ValueError("gradient list does not align with network layers")
    for i, (p, g) in enumerate(zip(network.params, grads)):
        for name, w in p.items():
            grad = g.get(name)
            if grad is None:
                continue
            if grad.shape != w.shape:
                raise ValueError(f"layer {i} {name}: grad shape {grad.shape} != {w.shape}")
            v = state.velocity.get((i, name))
            if v is None:
                v = state.velocity[(i, name)] = np.zeros_like(w)
            v *= state.momentum
            v -= state.learning_rate * grad.astype(w.dtype, copy=False)
            w += v
    return network
