"""Retinal artery/vein segmentation: numpy autodiff, Inception-Unet with cascading dilated convolutions."""
from .model import ModelConfig, analyze, build_model
from .tensor import Tensor, backward, no_grad

__all__ = ["ModelConfig", "Tensor", "analyze", "backward", "build_model", "no_grad"]
__version__ = "0.1.0"
