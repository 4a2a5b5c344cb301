"""Backdoor-robust training of a linear head on frozen feature embeddings.

Clean labels are treated as latent: an EM loop alternates an entropic
optimal-transport E-step (pseudolabels under a class-prior constraint) with
SGD on spherical class prototypes and a label-flip model.
"""

from .data import Coupling, FeatureSet, ModelParams, TrainConfig
from .em import predict, train, train_baseline
from .errors import VibeError

__all__ = ["Coupling", "FeatureSet", "ModelParams", "TrainConfig", "VibeError", "predict", "train",
           "train_baseline"]
__version__ = "0.1.0"
