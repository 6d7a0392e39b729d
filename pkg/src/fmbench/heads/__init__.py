"""Task heads over frozen features and their supervised training loop."""

from .config import (ATTENTION_KINDS, DEFAULT_LR_GRID, HEAD_KINDS, MASK_KINDS,
                     POOLED_KINDS, HeadConfig, TrainConfig, TrainedHead,
                     load_head, save_head)
from .forward import (attention_pool_forward, forward_batch, head_forward,
                      init_params, n_params, pool_tokens, sample_representation,
                      unpack)
from .gradcheck import analytic_gradient_norm, gradient_check
from .train import (accuracy_metric, cross_entropy, infer_input_dim, mse,
                    neg_mse_metric, predict, train_head)

__all__ = [
    "ATTENTION_KINDS", "DEFAULT_LR_GRID", "HEAD_KINDS", "MASK_KINDS",
    "POOLED_KINDS", "HeadConfig", "TrainConfig", "TrainedHead",
    "accuracy_metric", "analytic_gradient_norm", "attention_pool_forward",
    "cross_entropy", "forward_batch", "gradient_check", "head_forward",
    "infer_input_dim", "init_params", "load_head", "mse", "n_params",
    "neg_mse_metric", "pool_tokens", "predict", "sample_representation",
    "save_head", "train_head", "unpack",
]
