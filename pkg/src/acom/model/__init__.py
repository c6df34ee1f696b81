"""Split downstream model, losses, MAC accounting and training."""

from acom.model.layers import time_avg_pool
from acom.model.losses import (
    LossWeights,
    combined_loss,
    cross_entropy,
    ctc_loss,
    kl_label_smooth_loss,
    log_softmax,
)
from acom.model.macs import MacReport, mac_count
from acom.model.network import SplitModel, classification_layers, default_model, sequence_layers
from acom.model.synthetic import make_classification, make_sequence
from acom.model.training import (
    TrainConfig,
    Trainer,
    accuracy,
    finetune,
    finetune_step,
    train_baseline,
)

__all__ = [
    "LossWeights",
    "MacReport",
    "SplitModel",
    "TrainConfig",
    "Trainer",
    "accuracy",
    "classification_layers",
    "combined_loss",
    "cross_entropy",
    "ctc_loss",
    "default_model",
    "finetune",
    "finetune_step",
    "kl_label_smooth_loss",
    "log_softmax",
    "mac_count",
    "make_classification",
    "make_sequence",
    "sequence_layers",
    "time_avg_pool",
    "train_baseline",
]
