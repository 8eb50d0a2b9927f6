"""Central finite-difference checks for every autodiff primitive and the composed GAN losses.

Each check draws small random float64 tensors, contracts non-scalar outputs with a
fixed random weight so the function is scalar, and compares the reverse-mode gradient
of every input against (f(x + eps) - f(x - eps)) / (2 eps).
Coordinates whose perturbation moves any abs / leaky ReLU element across its kink
are excluded from the comparison and counted; single-op inputs are also drawn
away from the kink so those cases skip nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import tensor as T
from .nn.tensor import Tensor

EPS = 1e-3
TOLERANCE = 1e-4
KINK_MARGIN = 0.05


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    checked: int = 0  # coordinates compared
    skipped: int = 0  # coordinates whose +-eps perturbation crossed a kink
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance and self.checked > 0

    def to_json(self) -> dict:
        return {"name": self.name, "trials": self.trials, "max_rel_err": self.max_rel_err,
                "checked": self.checked, "skipped": self.skipped, "passed": self.passed}


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def _traced(f: Callable[[], float]) -> tuple[float, tuple]:
    """Evaluate f while recording which side of every kink each element fell on."""
    T.kink_log = []
    try:
        val = f()
        return val, tuple(m.tobytes() for m in T.kink_log)
    finally:
        T.kink_log = None


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the scalar f() with respect to x (perturbed in place).

    Also returns a mask of coordinates where both perturbations kept every kinked op
    on the same branch as the unperturbed point; elsewhere the quotient is meaningless.
    """
    _, base = _traced(f)
    g = np.zeros_like(x)
    valid = np.ones(x.shape, dtype=bool)
    flat, gflat, vflat = x.reshape(-1), g.reshape(-1), valid.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp, kp = _traced(f)
        flat[i] = old - eps
        fm, km = _traced(f)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
        vflat[i] = kp == base and km == base
    return g, valid


def _away(rng, shape, margin: float = KINK_MARGIN) -> np.ndarray:
    """Random values with |v| >= margin."""
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def check_function(build: Callable[..., Tensor], arrays: list[np.ndarray], eps: float = EPS) -> tuple[float, int, int]:
    """(largest relative error, coordinates checked, coordinates skipped) over all inputs of ``build``."""
    probe = build(*[Tensor(a) for a in arrays])
    weight = None
    if probe.value.ndim:
        weight = np.random.default_rng(len(arrays)).standard_normal(probe.shape)

    def scalar(out: Tensor) -> Tensor:
        return out if weight is None else T.sum_all(T.mul(out, Tensor(weight)))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(build(*leaves)).backward()
    worst, checked, skipped = 0.0, 0, 0
    for k, a in enumerate(arrays):
        work = [np.array(b, copy=True) for b in arrays]

        def f() -> float:
            return scalar(build(*[Tensor(b) for b in work])).item()

        num, valid = numeric_grad(f, work[k], eps)
        ana = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        ana = np.broadcast_to(ana, a.shape)
        checked += int(valid.sum())
        skipped += int((~valid).sum())
        if valid.any():
            worst = max(worst, rel_err(ana[valid], num[valid]))
    return worst, checked, skipped


# --------------------------------------------------------------------------
# cases: name -> (draw(rng) -> list of arrays, build(*tensors) -> Tensor)


def _tv_input(rng) -> np.ndarray:
    # accept only draws whose neighbour differences stay clear of the |.| kink
    while True:
        g = rng.standard_normal((2, 1, 5, 5))
        if min(np.abs(np.diff(g, axis=2)).min(), np.abs(np.diff(g, axis=3)).min()) > 4 * EPS:
            return g


def _tiny_discriminator(rng):
    from .gan import Discriminator

    D = Discriminator(base_channels=2, n_blocks=2, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    D.score.weight.value[...] = rng.standard_normal(D.score.weight.shape)
    return D


def _tiny_generator(rng):
    from .gan import Generator

    G = Generator(levels=2, base_channels=2, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    G.head.weight.value[...] = rng.standard_normal(G.head.weight.shape)
    return G


def _cases() -> dict:
    from . import gan

    def conv_case(stride):
        def draw(rng):
            return [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]

        return draw, lambda x, w, b: T.conv2d(x, w, b, stride=stride)

    def gen_loss_case(rng_holder):
        def draw(rng):
            rng_holder["D"] = _tiny_discriminator(rng)
            gx = _tv_input(rng)[:1]
            z = gx + _away(rng, gx.shape)
            return [gx, z]

        def build(gx, z):
            d = rng_holder["D"](gx)
            return gan.generator_loss(gx, z, d, gan.LossWeights(alpha=0.05, beta=1.3)).total

        return draw, build

    def disc_loss_case(rng_holder):
        def draw(rng):
            rng_holder["D"] = _tiny_discriminator(rng)
            return [rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))]

        def build(fake, real):
            D = rng_holder["D"]
            return gan.discriminator_loss(D(fake), D(real))

        return draw, build

    def gen_net_case(rng_holder):
        def draw(rng):
            rng_holder["G"] = _tiny_generator(rng)
            return [rng.random((1, 1, 8, 8))]

        return draw, lambda x: rng_holder["G"](x)

    return {
        "add": (lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))], T.add),
        "neg": (lambda r: [r.standard_normal((2, 3))], T.neg),
        "mul": (lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((1, 4))], T.mul),
        "abs": (lambda r: [_away(r, (3, 4))], T.absolute),
        "square": (lambda r: [r.standard_normal((3, 4))], T.square),
        "sum": (lambda r: [r.standard_normal((2, 3, 4))], T.sum_all),
        "mean": (lambda r: [r.standard_normal((2, 3, 4))], T.mean_all),
        "index": (lambda r: [r.standard_normal((2, 1, 5, 5))], lambda a: a[:, :, 1:, :-2]),
        "leaky_relu": (lambda r: [_away(r, (1, 2, 6, 6))], lambda a: T.leaky_relu(a, 0.2)),
        "sigmoid": (lambda r: [3 * r.standard_normal((2, 5))], T.sigmoid),
        "conv2d": conv_case(1),
        "conv2d_stride2": conv_case(2),
        "upsample_nearest2x": (lambda r: [r.standard_normal((1, 2, 3, 4))], T.upsample_nearest2x),
        "concat": (lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 1, 3, 3))], lambda a, b: T.concat([a, b])),
        "global_avg_pool": (lambda r: [r.standard_normal((2, 3, 4, 4))], T.global_avg_pool),
        "dense": (lambda r: [r.standard_normal((2, 4)), r.standard_normal((3, 4)), r.standard_normal(3)], T.dense),
        "l1_loss": (lambda r: (lambda g: [g, g + _away(r, g.shape)])(r.standard_normal((2, 1, 4, 4))), gan.l1_loss),
        "tv_loss": (lambda r: [_tv_input(r)], gan.tv_loss),
        "adversarial_term": (lambda r: [r.uniform(0.05, 0.95, (3, 1))], gan.adversarial_term),
        "generator_loss": gen_loss_case({}),
        "discriminator_loss": disc_loss_case({}),
        "generator_network": gen_net_case({}),
    }


def case_names() -> list[str]:
    return list(_cases().keys())


def run_suite(trials: int = 20, seed: int = 0, names: list[str] | None = None, eps: float = EPS) -> list[CheckResult]:
    cases = _cases()
    results = []
    for name in names or list(cases):
        draw, build = cases[name]
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        worst, checked, skipped = 0.0, 0, 0
        for _ in range(trials):
            w, c, k = check_function(build, draw(rng), eps)
            worst, checked, skipped = max(worst, w), checked + c, skipped + k
        results.append(CheckResult(name, trials, worst, checked, skipped))
    return results
