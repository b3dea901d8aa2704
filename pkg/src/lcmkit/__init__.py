"""Desk-scale latent convolutional image models.

Train a shared generator jointly with per-image latent ConvNets whose
parameters form the latent space, then restore degraded images (inpainting,
superresolution, colorization) by optimizing over that space.
"""

from ._kernels import backend_name
from .tensor import (ParamBlock, Tape, TensorMap, backward, default_dtype,
                     set_default_dtype)

__all__ = [
    "ParamBlock",
    "Tape",
    "TensorMap",
    "backward",
    "backend_name",
    "default_dtype",
    "set_default_dtype",
]

__version__ = "0.1.0"
