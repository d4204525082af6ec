"""Graph neural network bisection model."""

from polyagg.gnn.layers import dense, inorm, sage_conv, softmax
from polyagg.gnn.model import (
    Architecture,
    GnnModel,
    forward,
    gradient,
    load_model,
    loss,
    loss_and_gradient,
    ncut_loss,
    save_model,
)
from polyagg.gnn.train import (
    AdamState,
    Sample,
    TrainConfig,
    TrainDatasetSpec,
    TrainResult,
    adam_step,
    train,
)

__all__ = [
    "AdamState",
    "Architecture",
    "GnnModel",
    "Sample",
    "TrainConfig",
    "TrainDatasetSpec",
    "TrainResult",
    "adam_step",
    "dense",
    "forward",
    "gradient",
    "inorm",
    "load_model",
    "loss",
    "loss_and_gradient",
    "ncut_loss",
    "sage_conv",
    "save_model",
    "softmax",
    "train",
]
