"""Class-agnostic counting trained only on self-composed collages."""

from .backbone import BackboneSpec, load_backbone
from .clustering import ClusterModel, fit_kmeans
from .composer import Composer, ComposerConfig, compose
from .inference import InferenceConfig, count_image
from .model import CountingModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "BackboneSpec", "load_backbone", "ClusterModel", "fit_kmeans", "Composer", "ComposerConfig",
    "compose", "InferenceConfig", "count_image", "CountingModel", "ModelConfig", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "train",
]
