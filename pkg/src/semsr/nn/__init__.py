from .layers import Conv2d, ConvBlock, Dense, Module, Parameter
from .optim import adam_step
from .tensor import NonFiniteError, Tensor

__all__ = ["Conv2d", "ConvBlock", "Dense", "Module", "NonFiniteError", "Parameter", "Tensor", "adam_step"]
