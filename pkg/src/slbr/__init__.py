"""Two-stage visible watermark removal with self-calibrated mask localization and background refinement."""

from .network import SLBR, NetworkConfig, build_model
from .losses import LossWeights, PerceptualExtractor, total_loss
from .train import TrainConfig, train

__all__ = ["SLBR", "NetworkConfig", "build_model", "LossWeights", "PerceptualExtractor", "total_loss",
           "TrainConfig", "train"]
__version__ = "0.1.0"
