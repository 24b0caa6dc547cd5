"""Minimal float64 autodiff engine for the two segmentation networks."""
from . import functional
from .modules import BatchNorm3d, Conv3d, ConvBlock, ConvTranspose3d, Module, UpBlock
from .optim import Adam
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "BatchNorm3d", "Conv3d", "ConvBlock", "ConvTranspose3d", "Module",
    "Tensor", "UpBlock", "functional", "no_grad",
]
