"""Network-based stain normalizer trained to invert heavy color augmentation."""

from .layers import BatchNorm2d, Conv2d, LeakyReLU, NearestUpsample2x, Tanh
from .network import NetworkSpec, StainNormNet, load_weights, save_weights
from .tensor import Tensor
from .training import (
    AdamState,
    TrainConfig,
    TrainLog,
    adam_step,
    backward,
    l2_penalty,
    mse_grad,
    mse_loss,
    normalize_network,
    train,
)


def forward(net: StainNormNet, x, training: bool = False):
    """Run the network on an (N, H, W, C) batch."""
    return net.forward(x, training=training)


__all__ = [
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "LeakyReLU",
    "NearestUpsample2x",
    "NetworkSpec",
    "StainNormNet",
    "Tanh",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "backward",
    "forward",
    "l2_penalty",
    "load_weights",
    "mse_grad",
    "mse_loss",
    "normalize_network",
    "save_weights",
    "train",
]
