from __future__ import annotations

import numpy as np

from .layers import Parameter


def adam_step(params: list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update per parameter; gradients are cleared afterwards."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for {', '.join(missing[:5])}")
    for p in params:
        g = p.grad.astype(p.value.dtype, copy=False)
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        bc1 = 1.0 - beta1**p.step
        bc2 = 1.0 - beta2**p.step
        denom = np.sqrt(p.v / p.value.dtype.type(bc2)) + p.value.dtype.type(eps)
        p.value -= p.value.dtype.type(lr / bc1) * p.m / denom
        p.grad = None
