"""Hybrid Mamba-Transformer hyperspectral classifier with visual-textual prompting, on a numpy autodiff engine."""

from .backbone import Backbone, ModelConfig
from .data import HsiScene, SplitSpec, load_scene, make_synthetic_scene, save_scene, stratified_split
from .errors import VPHypeError
from .metrics import ConfusionMatrix, compute_metrics
from .model import VPHype
from .prompts import PromptBank, PromptConfig
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ConfusionMatrix",
    "HsiScene",
    "ModelConfig",
    "PromptBank",
    "PromptConfig",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "VPHype",
    "VPHypeError",
    "compute_metrics",
    "load_checkpoint",
    "load_scene",
    "make_synthetic_scene",
    "no_grad",
    "save_checkpoint",
    "save_scene",
    "stratified_split",
    "train",
]
