"""
AdaDelta with a global update scale, and global-norm gradient clipping.
"""

import math
from typing import Dict, Tuple

import numpy as np

Tensors = Dict[str, np.ndarray]


def global_norm(grads: Tensors) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: Tensors, max_norm: float) -> Tuple[Tensors, float]:
    """
    Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns:
        clipped gradients (new arrays) and the norm before clipping
    """
    norm = global_norm(grads)
    coef = max_norm / (norm + 1e-6)
    if coef >= 1.0:
        return {k: g.copy() for k, g in grads.items()}, norm
    return {k: g * coef for k, g in grads.items()}, norm


class AdaDelta:
    """
    AdaDelta; ``scale`` multiplies every step (the "learning rate").

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        delta   =  sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
        x       <- x - scale * delta
    """

    def __init__(self, rho: float = 0.95, epsilon: float = 1e-6, scale: float = 0.1):
        self.rho = rho
        self.epsilon = epsilon
        self.scale = scale
        self._square_avg: Tensors = {}
        self._delta_avg: Tensors = {}

    def reset(self) -> None:
        self._square_avg.clear()
        self._delta_avg.clear()

    def step(self, params: Tensors, grads: Tensors) -> None:
        """Update ``params`` in place."""
        rho, eps = self.rho, self.epsilon
        for name, grad in grads.items():
            sq = self._square_avg.setdefault(name, np.zeros_like(grad))
            acc = self._delta_avg.setdefault(name, np.zeros_like(grad))
            sq *= rho
            sq += (1.0 - rho) * grad * grad
            delta = np.sqrt(acc + eps) / np.sqrt(sq + eps) * grad
            acc *= rho
            acc += (1.0 - rho) * delta * delta
            params[name] -= self.scale * delta
