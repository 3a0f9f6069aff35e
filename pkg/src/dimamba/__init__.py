"""Diffusion Mamba: bidirectional selective-scan denoisers for DDPM image and video generation."""

from .kernels import BACKEND
from .model import DimModel, ModelConfig, build_model, count_params, forward

__version__ = "0.1.0"

__all__ = ["BACKEND", "DimModel", "ModelConfig", "build_model", "count_params", "forward", "__version__"]
