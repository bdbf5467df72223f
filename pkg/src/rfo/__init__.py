"""Reparameterised policy gradients for flow-matching policies on a
hand-rolled reverse-mode tape, with differentiable toy environments."""

from .config import TrainConfig, load_config
from .trainer import evaluate, train, train_shac_gaussian

__version__ = "0.1.0"

__all__ = ["TrainConfig", "load_config", "train", "train_shac_gaussian", "evaluate", "__version__"]
