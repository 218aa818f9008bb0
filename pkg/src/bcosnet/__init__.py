"""Branch-cooperative OSNet for person re-identification."""

from .backbone import BRANCH_IDS, TrunkConfig
from .evaluation import evaluate, extract_features, pairwise_distances
from .losses import LossWeights, TripletConfig
from .model import BCOSNet, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BRANCH_IDS",
    "BCOSNet",
    "LossWeights",
    "ModelConfig",
    "TripletConfig",
    "TrunkConfig",
    "evaluate",
    "extract_features",
    "pairwise_distances",
]
