"""Downstream predictors: gated-attention MIL for tile bags, an MLP for slide vectors."""

from .models import (
    GatedAttentionMIL,
    SlideMLP,
    loss_and_grads,
    mil_backward,
    mil_forward,
    mlp_backward,
    mlp_forward,
)
from .train import (
    AdamState,
    Predictions,
    TrainConfig,
    TrainedModel,
    adam_step,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_mil,
    train_mlp,
)

__all__ = [
    "AdamState", "GatedAttentionMIL", "Predictions", "SlideMLP", "TrainConfig", "TrainedModel",
    "adam_step", "load_checkpoint", "loss_and_grads", "mil_backward", "mil_forward", "mlp_backward",
    "mlp_forward", "predict", "save_checkpoint", "train_mil", "train_mlp",
]
