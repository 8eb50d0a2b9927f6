"""Parameters and the two layer types with weights."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value, name: str = ""):
        super().__init__(value, requires_grad=True, name=name)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


class Module:
    """Anything owning named Parameters, possibly through child modules."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in self.__dict__.items():
            if isinstance(val, Parameter):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def he_std(fan_in: int, slope: float) -> float:
    return math.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3, stride: int = 1,
                 slope: float = 0.2, dtype=np.float32, zero_init: bool = False, name: str = "conv"):
        self.stride = stride
        self.label = name
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = (rng.standard_normal((cout, cin, k, k)) * he_std(cin * k * k, slope)).astype(dtype)
        self.weight = Parameter(w, name=name + ".weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), name=name + ".bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, name=self.label)


class Dense(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32,
                 zero_init: bool = False, name: str = "dense"):
        self.label = name
        if zero_init:
            w = np.zeros((cout, cin), dtype=dtype)
        else:
            w = (rng.standard_normal((cout, cin)) / math.sqrt(cin)).astype(dtype)
        self.weight = Parameter(w, name=name + ".weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), name=name + ".bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias, name=self.label)


class ConvBlock(Module):
    """Two 3x3 convolutions, each followed by a leaky ReLU; the second one sets the output channel count.

    The first convolution keeps the channel count and carries the stride when the block down-samples.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, slope: float = 0.2,
                 dtype=np.float32, name: str = "block"):
        self.slope = slope
        self.label = name
        self.conv1 = Conv2d(cin, cin, rng, stride=stride, slope=slope, dtype=dtype, name=name + ".conv1")
        self.conv2 = Conv2d(cin, cout, rng, slope=slope, dtype=dtype, name=name + ".conv2")

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.conv1(x), self.slope, name=self.label + ".act1")
        return T.leaky_relu(self.conv2(h), self.slope, name=self.label + ".act2")
