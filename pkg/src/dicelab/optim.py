"""Adam in float32 with explicit moment state, so it can be checkpointed exactly."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def init_state(self, params: dict[str, np.ndarray]) -> tuple[dict, dict]:
        return {k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()}

    def step(self, params: dict, grads: dict, m: dict, v: dict, t: int, lr: float) -> None:
        """One update at 1-based step ``t``; mutates the dicts, never the arrays inside them."""
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        one = np.float32(1)
        c1 = np.float32(1.0 - self.beta1**t)
        c2 = np.float32(1.0 - self.beta2**t)
        lr, eps = np.float32(lr), np.float32(self.eps)
        for k, g in grads.items():
            m[k] = b1 * m[k] + (one - b1) * g
            v[k] = b2 * v[k] + (one - b2) * g * g
            params[k] = params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm
