"""Mixture-of-LoRA-experts code translation at desk scale."""

from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor

__all__ = ["Model", "ModelConfig", "Tensor", "load_checkpoint", "save_checkpoint"]

__version__ = "0.1.0"
