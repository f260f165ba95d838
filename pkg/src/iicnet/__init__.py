"""Invertible networks that embed several images into one image and restore them."""
from .pipeline import (
    ConfigError,
    EmbeddingImage,
    EmbedResult,
    IICNet,
    ImageStack,
    NetworkConfig,
    embed,
    restore,
    roundtrip_core_check,
)
from .tensor import Tensor, no_grad
from .training import LossWeights, TrainRunSpec, evaluate, train

__version__ = "0.1.0"
