"""Finite-difference verification of analytic head gradients."""

from __future__ import annotations

import numpy as np

from .config import HeadConfig
from .forward import backward_batch, forward_batch
from .train import OBJECTIVES, infer_input_dim


def gradient_check(config: HeadConfig, weights: np.ndarray, inputs, targets,
                   objective: str = "cross_entropy", h: float = 1e-4) -> float:
    """Max-norm relative error between analytic and central-difference gradients.

    Error = max_i |g_a[i] - g_n[i]| / max(1e-8, max_i max(|g_a[i]|, |g_n[i]|)).
    """
    objective_fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    input_dim = infer_input_dim(inputs)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)

    out, cache = forward_batch(config, input_dim, weights, inputs)
    _, gout = objective_fn(out, targets)
    analytic = backward_batch(config, input_dim, weights, inputs, cache, gout)

    def loss_at(w):
        o, _ = forward_batch(config, input_dim, w, inputs)
        return objective_fn(o, targets)[0]

    numeric = np.empty_like(analytic)
    for i in range(weights.size):
        wp = weights.copy()
        wp[i] += h
        up = loss_at(wp)
        wp[i] -= 2 * h
        down = loss_at(wp)
        numeric[i] = (up - down) / (2 * h)

    scale = max(1e-8, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric)) / scale)


def analytic_gradient_norm(config: HeadConfig, weights: np.ndarray, inputs, targets,
                           objective: str = "mse") -> float:
    """Euclidean norm of the analytic parameter gradient at a point."""
    objective_fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    input_dim = infer_input_dim(inputs)
    out, cache = forward_batch(config, input_dim, weights, inputs)
    _, gout = objective_fn(out, targets)
    grad = backward_batch(config, input_dim, weights, inputs, cache, gout)
    return float(np.linalg.norm(grad))
