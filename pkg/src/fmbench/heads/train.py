"""Supervised head training: SGD + momentum, cosine decay, 10-point lr grid.

One candidate head is trained per learning rate in the grid; the head with the
best validation score is returned.  Everything is deterministic given the
TrainConfig seed: initialization comes from a splitmix stream and the per-epoch
shuffles are seeded independently of the learning rate, so candidates differ
only in step size.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DivergenceError, LabelError, ShapeError
from ..rng import derive_key, generator
from .config import ATTENTION_KINDS, HeadConfig, TrainConfig, TrainedHead
from .forward import backward_batch, forward_batch, init_params


def cross_entropy(outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    t = np.asarray(targets, dtype=np.int64)
    n = outputs.shape[0]
    shifted = outputs - outputs.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), t].mean()
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1.0
    return float(loss), grad / n


def mse(outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean squared error over all output elements and its gradient."""
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    diff = outputs - t
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size

OBJECTIVES = {"cross_entropy": cross_entropy, "mse": mse}


def _slice_inputs(inputs, idx):
    if isinstance(inputs, np.ndarray):
        return inputs[idx]
    return [inputs[i] for i in idx]


def infer_input_dim(inputs) -> int:
    if isinstance(inputs, np.ndarray):
        return inputs.shape[1]
    return inputs[0].shape[1]


def accuracy_metric(outputs: np.ndarray, targets) -> float:
    pred = outputs.argmax(axis=1)
    return float((pred == np.asarray(targets)).mean())


def neg_mse_metric(outputs: np.ndarray, targets) -> float:
    return -mse(outputs, targets)[0]


def train_head(train_inputs, train_targets, val_inputs, val_targets,
               config: HeadConfig, tc: TrainConfig, objective="cross_entropy",
               val_metric=None, full_batch: bool = False) -> TrainedHead:
    """Grid-search the lr, train each candidate, return the best on validation.

    ``objective`` is ``"cross_entropy"``, ``"mse"``, or a callable
    ``(outputs, batch_targets) -> (loss, grad_wrt_outputs)``.  ``val_metric``
    (higher is better) defaults to accuracy for cross-entropy and negative MSE
    for MSE.  ``full_batch`` forces one whole-set step per epoch, which
    objectives over joint batch structure (partial likelihoods) require.
    """
    n = len(train_targets) if not isinstance(train_targets, np.ndarray) else train_targets.shape[0]
    if n == 0:
        raise ShapeError("empty training set")
    if isinstance(objective, str):
        if objective == "cross_entropy":
            classes = np.unique(np.asarray(train_targets))
            if classes.size < 2:
                raise LabelError("classification training set holds a single class")
            if val_metric is None:
                val_metric = accuracy_metric
        elif objective == "mse" and val_metric is None:
            val_metric = neg_mse_metric
        objective_fn = OBJECTIVES[objective]
    else:
        objective_fn = objective
        if val_metric is None:
            raise ShapeError("a callable objective needs an explicit val_metric")

    input_dim = infer_input_dim(train_inputs)
    batch_size = n if full_batch else min(tc.batch_size, n)
    init = init_params(config, input_dim, tc.seed)

    best = None
    for lr0 in tc.lr_grid:
        params = init.copy()
        velocity = np.zeros_like(params)
        epoch_losses = []
        diverged = False
        for epoch in range(tc.epochs):
            lr = lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / tc.epochs))
            order = generator(derive_key(tc.seed, "perm", epoch)).permutation(n)
            losses = []
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                bx = _slice_inputs(train_inputs, idx)
                bt = _slice_inputs(train_targets, idx) if not isinstance(
                    train_targets, np.ndarray) else train_targets[idx]
                out, cache = forward_batch(config, input_dim, params, bx)
                loss, gout = objective_fn(out, bt)
                grad = backward_batch(config, input_dim, params, bx, cache, gout)
                velocity = tc.momentum * velocity - lr * grad
                params = params + velocity
                losses.append(loss)
            if not np.all(np.isfinite(params)):
                diverged = True  # too-large lr: drop this candidate
                break
            epoch_losses.append(float(np.mean(losses)))
        if diverged:
            continue
        val_out, _ = forward_batch(config, input_dim, params, val_inputs)
        score = float(val_metric(val_out, val_targets))
        if np.isnan(score):
            continue
        if best is None or score > best.val_score:
            best = TrainedHead(config=config, weights=params, best_lr=float(lr0),
                               val_score=score, seed=tc.seed, input_dim=input_dim,
                               epoch_losses=epoch_losses)
    if best is None:
        raise DivergenceError("every learning-rate candidate diverged", iteration=-1)
    return best


def predict(head: TrainedHead, inputs) -> np.ndarray:
    """Batch outputs (n, n_outputs) of a trained head."""
    if (not isinstance(inputs, np.ndarray) and head.config.kind not in ATTENTION_KINDS):
        inputs = np.asarray(inputs)
    out, _ = forward_batch(head.config, head.input_dim, head.weights, inputs)
    return out
