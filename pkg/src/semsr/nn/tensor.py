"""Reverse-mode differentiation over numpy arrays, limited to the primitives the networks use.

Image tensors are laid out (batch, channels, height, width).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# When a list, kinked ops append the branch they took per element (finite-difference checks
# use this to skip coordinates whose perturbation crosses a kink).
kink_log: list | None = None


def _log_branch(mask: np.ndarray) -> None:
    if kink_log is not None:
        kink_log.append(mask.copy())


class NonFiniteError(FloatingPointError):
    """Raised when an activation or gradient stops being finite."""


def _check_finite(arr: np.ndarray, where: str, what: str = "activation") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite {what} in {where}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=self.value.dtype)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            _check_finite(node.grad, node.name or "<tensor>", "gradient")
            node.backward_fn(node.grad)
            if node.parents:
                # interior node: release to keep memory flat during long graphs
                node.grad = None

    # arithmetic sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    _check_finite(value, name)
    out = Tensor(value, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / reductions


def add(a, b, name: str = "add") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw, name)


def neg(a: Tensor, name: str = "neg") -> Tensor:
    return _make(-a.value, (a,), lambda g: a.accumulate(-g), name)


def mul(a, b, name: str = "mul") -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), bw, name)


def absolute(a: Tensor, name: str = "abs") -> Tensor:
    # d|v|/dv = sign(v), taking 0 at v == 0
    _log_branch(a.value > 0)
    return _make(np.abs(a.value), (a,), lambda g: a.accumulate(g * np.sign(a.value)), name)


def square(a: Tensor, name: str = "square") -> Tensor:
    return _make(a.value * a.value, (a,), lambda g: a.accumulate(2 * g * a.value), name)


def sum_all(a: Tensor, name: str = "sum") -> Tensor:
    return _make(np.asarray(a.value.sum()), (a,), lambda g: a.accumulate(np.broadcast_to(g, a.shape).copy()), name)


def mean_all(a: Tensor, name: str = "mean") -> Tensor:
    n = a.value.size
    return _make(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: a.accumulate(np.full(a.shape, g / n, dtype=a.dtype)),
        name,
    )


def index(a: Tensor, idx, name: str = "index") -> Tensor:
    def bw(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        a.accumulate(full)

    return _make(a.value[idx], (a,), bw, name)


def leaky_relu(x: Tensor, slope: float = 0.2, name: str = "leaky_relu") -> Tensor:
    if not 0 < slope < 1:
        raise ValueError("leaky slope must be in (0, 1)")
    pos = x.value >= 0
    _log_branch(pos)
    out = np.where(pos, x.value, x.value * x.dtype.type(slope))

    def bw(g):
        x.accumulate(np.where(pos, g, g * g.dtype.type(slope)))

    return _make(out, (x,), bw, name)


def sigmoid(x: Tensor, name: str = "sigmoid") -> Tensor:
    v = x.value
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        x.accumulate(g * out * (1 - out))

    return _make(out, (x,), bw, name)


# --------------------------------------------------------------------------
# image ops


# Image tensors are (batch, channels, height, width) logically, but the ops below
# keep their results channels-last in memory (NCHW views over NHWC buffers) so that
# im2col gathers and the backward scatter touch contiguous channel runs.


def _nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, name: str = "conv2d") -> Tensor:
    """Cross-correlation with zero 'same' padding (k // 2 each side).

    At stride 1 spatial dims are preserved; at stride 2 even dims are halved.
    """
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ValueError(f"{name}: input has {c} channels, kernel expects {ci} (kernel {k}x{k2})")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = _nhwc(x.value)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # rows ordered (kernel row, kernel col, channel)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(weight.value.transpose(0, 2, 3, 1)).reshape(o, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.value
    out = _nchw(out.reshape(n, ho, wo, o))

    def bw(g):
        g2 = _nhwc(g).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight.accumulate(np.ascontiguousarray((g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            x.accumulate(_nchw(dxp[:, pad : pad + h, pad : pad + w, :]))

    return _make(out, (x, weight) + ((bias,) if bias is not None else ()), bw, name)


def upsample_nearest2x(x: Tensor, name: str = "upsample") -> Tensor:
    n, c, h, w = x.shape
    xh = _nhwc(x.value)
    out = np.broadcast_to(xh[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def bw(g):
        gh = np.ascontiguousarray(_nhwc(g)).reshape(n, h, 2, w, 2, c)
        x.accumulate(_nchw(gh.sum(axis=(2, 4))))

    return _make(_nchw(out), (x,), bw, name)


def concat(xs: list[Tensor], axis: int = 1, name: str = "concat") -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    if axis == 1 and all(t.value.ndim == 4 for t in xs):
        value = _nchw(np.concatenate([_nhwc(t.value) for t in xs], axis=3))
    else:
        value = np.concatenate([t.value for t in xs], axis=axis)
    return _make(value, tuple(xs), bw, name)


def global_avg_pool(x: Tensor, name: str = "gap") -> Tensor:
    n, c, h, w = x.shape

    def bw(g):
        x.accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _make(x.value.mean(axis=(2, 3)), (x,), bw, name)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None, name: str = "dense") -> Tensor:
    """(n, in) @ weight(out, in).T + bias."""
    out = x.value @ weight.value.T
    if bias is not None:
        out = out + bias.value

    def bw(g):
        if weight.requires_grad:
            weight.accumulate(g.T @ x.value)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ weight.value)

    return _make(out, (x, weight) + ((bias,) if bias is not None else ()), bw, name)
