"""U-Net generator, VGG-style discriminator, the adversarial losses, training and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import PatchSet, dihedral
from .imaging import ImageGrid, lanczos_upsample
from .nn import tensor as T
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import Conv2d, ConvBlock, Dense, Module, Parameter
from .nn.optim import adam_step
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

# target shares of the generator loss: adversarial, L1, TV
SHARE_ADV, SHARE_L1, SHARE_TV = 0.84, 0.14, 0.02


# --------------------------------------------------------------------------
# networks


class Generator(Module):
    """U-Net on the up-sampled input, predicting a correction added back to that input.

    The output 1x1 convolution starts at zero, so an untrained generator is the identity map.
    """

    def __init__(self, levels: int = 4, base_channels: int = 32, slope: float = 0.2, seed: int = 0, dtype=np.float32):
        if levels < 2:
            raise ValueError("generator needs at least 2 levels")
        rng = np.random.default_rng([seed, 101])
        self.levels = levels
        self.base_channels = base_channels
        self.slope = slope
        ch = [base_channels * 2**k for k in range(levels)]
        self.enc = [ConvBlock(1, ch[0], rng, slope=slope, dtype=dtype, name="enc0")]
        for k in range(1, levels):
            self.enc.append(ConvBlock(ch[k - 1], ch[k], rng, stride=2, slope=slope, dtype=dtype, name=f"enc{k}"))
        self.up = []
        self.dec = []
        for k in range(levels - 2, -1, -1):
            self.up.append(Conv2d(ch[k + 1], ch[k], rng, slope=slope, dtype=dtype, name=f"up{k}"))
            self.dec.append(ConvBlock(2 * ch[k], ch[k], rng, slope=slope, dtype=dtype, name=f"dec{k}"))
        self.head = Conv2d(ch[0], 1, rng, k=1, dtype=dtype, zero_init=True, name="head")

    @property
    def min_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def receptive_radius(self) -> int:
        """Bound, in input pixels, on how far from an output pixel the network can see.

        Encoder level k >= 1 adds 3 * 2^(k-1) (strided conv plus conv), decoder level k adds
        4 * 2^k (nearest up-sampling, up conv, two block convs), the first block adds 2.
        """
        return 2 + 7 * (2 ** (self.levels - 1) - 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        skips = []
        for block in self.enc:
            h = block(h)
            skips.append(h)
        for i, (up, dec) in enumerate(zip(self.up, self.dec)):
            k = self.levels - 2 - i
            h = T.leaky_relu(up(T.upsample_nearest2x(h, name=f"up{k}.resize")), self.slope, name=f"up{k}.act")
            h = dec(T.concat([h, skips[k]], name=f"dec{k}.concat"))
        return T.add(self.head(h), x, name="residual")


class Discriminator(Module):
    """Conv blocks with stride-2 transitions, global average pool, dense score, sigmoid."""

    def __init__(self, base_channels: int = 32, n_blocks: int = 4, slope: float = 0.2, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 202])
        self.base_channels = base_channels
        ch = [base_channels * 2**k for k in range(n_blocks)]
        self.blocks = [ConvBlock(1, ch[0], rng, slope=slope, dtype=dtype, name="d0")]
        for k in range(1, n_blocks):
            self.blocks.append(ConvBlock(ch[k - 1], ch[k], rng, stride=2, slope=slope, dtype=dtype, name=f"d{k}"))
        # zero-initialised score: an untrained discriminator outputs exactly 0.5
        self.score = Dense(ch[-1], 1, rng, dtype=dtype, zero_init=True, name="score")

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for b in self.blocks:
            h = b(h)
        return T.sigmoid(self.score(T.global_avg_pool(h)), name="d_out")


# --------------------------------------------------------------------------
# losses


def _as4d(a) -> Tensor:
    t = T.as_tensor(a)
    if t.value.ndim == 2 and not t.requires_grad:
        t = Tensor(t.value[None, None])
    if t.value.ndim != 4:
        raise ValueError(f"expected (batch, channels, h, w) or (h, w), got {t.shape}")
    return t


def _check_inputs(*arrs) -> None:
    for a in arrs:
        v = a.value if isinstance(a, Tensor) else np.asarray(a)
        if not np.isfinite(v).all():
            raise ValueError("non-finite loss input")


def l1_loss(gx, z) -> Tensor:
    """Mean absolute pixel difference, averaged over pixels and batch."""
    gx, z = _as4d(gx), _as4d(z)
    if gx.shape != z.shape:
        raise ValueError(f"shape mismatch {gx.shape} vs {z.shape}")
    _check_inputs(gx, z)
    return T.mean_all(T.absolute(T.add(gx, T.neg(z))), name="l1")


def tv_loss(gx) -> Tensor:
    """Anisotropic total variation: raw per-image sum of |vertical| + |horizontal| neighbour differences, batch-averaged."""
    gx = _as4d(gx)
    n, _, h, w = gx.shape
    if h < 2 or w < 2:
        raise ValueError("total variation needs spatial dims >= 2")
    _check_inputs(gx)
    dv = T.add(gx[:, :, 1:, :], T.neg(gx[:, :, :-1, :]))
    dh = T.add(gx[:, :, :, 1:], T.neg(gx[:, :, :, :-1]))
    total = T.add(T.sum_all(T.absolute(dv)), T.sum_all(T.absolute(dh)))
    return T.mul(total, 1.0 / n, name="tv")


def adversarial_term(d_of_gx) -> Tensor:
    """Batch mean of (1 - D(G(x)))^2."""
    d = T.as_tensor(d_of_gx)
    _check_inputs(d)
    return T.mean_all(T.square(T.add(1.0, T.neg(d))), name="adv")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        for v in (self.alpha, self.beta):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and non-negative")


@dataclass
class GeneratorLoss:
    total: Tensor
    l1: float
    tv: float
    adv: float  # unweighted (1 - D)^2 batch mean
    weights: LossWeights

    @property
    def terms(self) -> tuple[float, float, float]:
        """Weighted contributions (adversarial, L1, TV)."""
        return self.weights.beta * self.adv, self.l1, self.weights.alpha * self.tv


def generator_loss(gx, z, d_of_gx, w: LossWeights) -> GeneratorLoss:
    """L1(G(x), z) + alpha * TV(G(x)) + beta * (1 - D(G(x)))^2; D is skipped when it is None or beta == 0."""
    l1 = l1_loss(gx, z)
    tv = tv_loss(gx)
    total = l1
    if w.alpha != 0:
        total = T.add(total, T.mul(tv, w.alpha))
    adv_val = 0.0
    if d_of_gx is not None:
        adv = adversarial_term(d_of_gx)
        adv_val = adv.item()
        if w.beta != 0:
            total = T.add(total, T.mul(adv, w.beta))
    return GeneratorLoss(total, l1.item(), tv.item(), adv_val, w)


def discriminator_loss(d_of_gx, d_of_z) -> Tensor:
    """Batch mean of D(G(x))^2 + (1 - D(z))^2."""
    dg, dz = T.as_tensor(d_of_gx), T.as_tensor(d_of_z)
    _check_inputs(dg, dz)
    fake = T.mean_all(T.square(dg))
    real = T.mean_all(T.square(T.add(1.0, T.neg(dz))))
    return T.add(fake, real, name="d_loss")


def weights_from_measurements(l1: float, tv: float, adv_factor: float = 0.25) -> LossWeights:
    """alpha, beta giving adversarial : L1 : TV = 84 : 14 : 2 at the measured magnitudes.

    ``adv_factor`` is the mean of (1 - D(G(x)))^2; 0.25 corresponds to D(G(x)) = 0.5.
    """
    if not l1 > 0:
        raise ValueError("measured L1 is zero: probe batches are degenerate")
    alpha = (SHARE_TV / SHARE_L1) * l1 / tv if tv > 0 else 0.0
    beta = (SHARE_ADV / SHARE_L1) * l1 / adv_factor
    return LossWeights(alpha, beta)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 48000
    batch: int = 4
    lr: float = 1e-4
    lr_d: float = 1e-4
    alpha: float | None = None  # None: calibrate after the warm-up
    beta: float | None = None
    warmup_iterations: int = 500
    probe_batches: int = 8
    d_every: int = 4
    seed: int = 0
    levels: int = 4
    base_channels: int = 32
    d_base_channels: int = 32
    slope: float = 0.2
    checkpoint_every: int = 1000
    log_every: int = 50

    @property
    def auto_calibrate(self) -> bool:
        return self.alpha is None or self.beta is None


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    config: TrainConfig
    iteration: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    calibrated: bool = False
    d_updates: int = 0
    # running sums of weighted (adv, L1, TV) contributions and the number of summed steps
    share_sums: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.float32))
    history: list = field(default_factory=list)
    last: tuple | None = field(default=None, repr=False)
    initial_val_l1: float | None = None
    final_val_l1: float | None = None

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        g = Generator(cfg.levels, cfg.base_channels, cfg.slope, seed=cfg.seed)
        d = Discriminator(cfg.d_base_channels, slope=cfg.slope, seed=cfg.seed)
        st = cls(g, d, cfg)
        if not cfg.auto_calibrate:
            st.weights = _f32_weights(LossWeights(cfg.alpha, cfg.beta))
            st.calibrated = True
        return st

    def loss_shares(self) -> dict[str, float]:
        s = self.share_sums[:3].astype(np.float64)
        tot = s.sum()
        if tot <= 0:
            return {"adv": 0.0, "l1": 0.0, "tv": 0.0}
        return {"adv": s[0] / tot, "l1": s[1] / tot, "tv": s[2] / tot}

    # checkpointing --------------------------------------------------------
    def checkpoint_entries(self):
        entries = []
        for prefix, net in (("gen.", self.generator), ("disc.", self.discriminator)):
            for name, p in net.named_parameters():
                entries.append((prefix + name, p.value, p.m, p.v))
        g_step = self.generator.parameters()[0].step
        d_step = self.discriminator.parameters()[0].step
        meta = {
            "meta/arch": [self.generator.levels, self.generator.base_channels, self.discriminator.base_channels, self.config.slope],
            "meta/adam_steps": [g_step, d_step, self.d_updates],
            "meta/weights": [self.weights.alpha, self.weights.beta, float(self.calibrated)],
            "meta/shares": self.share_sums,
        }
        for name, vals in meta.items():
            arr = np.asarray(vals, dtype=np.float32)
            entries.append((name, arr, np.zeros_like(arr), np.zeros_like(arr)))
        return entries

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.checkpoint_entries(), self.iteration)

    @classmethod
    def load(cls, path: str | Path, cfg: TrainConfig | None = None) -> "TrainState":
        entries, step = load_checkpoint(path)
        levels, base, dbase, slope = (entries["meta/arch"][0]).tolist()
        if cfg is None:
            cfg = TrainConfig()
        # the slope is stored as float32; keep the configured double when it rounds to the stored value
        if np.float32(cfg.slope) != np.float32(slope):
            cfg = TrainConfig(**{**asdict(cfg), "slope": float(slope)})
        cfg = TrainConfig(**{**asdict(cfg), "levels": int(levels), "base_channels": int(base),
                             "d_base_channels": int(dbase)})
        st = cls.initial(cfg)
        for prefix, net in (("gen.", st.generator), ("disc.", st.discriminator)):
            for name, p in net.named_parameters():
                val, m, v = entries[prefix + name]
                if val.shape != p.value.shape:
                    raise ValueError(f"checkpoint shape mismatch for {prefix + name}")
                p.value[...] = val
                p.m[...] = m
                p.v[...] = v
        g_step, d_step, d_updates = (int(x) for x in entries["meta/adam_steps"][0])
        for p in st.generator.parameters():
            p.step = g_step
        for p in st.discriminator.parameters():
            p.step = d_step
        alpha, beta, cal = entries["meta/weights"][0].tolist()
        st.weights = LossWeights(alpha, beta)
        st.calibrated = bool(cal)
        st.d_updates = d_updates
        st.share_sums = entries["meta/shares"][0].copy()
        st.iteration = step
        return st


def _f32_weights(w: LossWeights) -> LossWeights:
    # weights live in float32 checkpoints; keep the in-memory values identical so resumes are exact
    return LossWeights(float(np.float32(w.alpha)), float(np.float32(w.beta)))


def _to_input(a: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(a[:, None], dtype=np.float32))


def sample_batch(patches: PatchSet, batch: int, seed: int, iteration: int, stream: int = 7):
    """Augmented batch for one iteration; a pure function of (seed, iteration)."""
    rng = np.random.default_rng([seed, stream, iteration])
    idx = rng.integers(0, len(patches), size=batch)
    ks = rng.integers(0, 8, size=batch)
    xs, zs = patches.arrays(idx)
    xs = np.stack([dihedral(a, int(k)) for a, k in zip(xs, ks)])
    zs = np.stack([dihedral(a, int(k)) for a, k in zip(zs, ks)])
    return xs.astype(np.float32), zs.astype(np.float32)


def train_step(state: TrainState, x: np.ndarray, z: np.ndarray) -> TrainState:
    """One iteration: generator always, discriminator when the new iteration count is a multiple of d_every."""
    cfg = state.config
    G, D = state.generator, state.discriminator
    t = state.iteration + 1
    xt, zt = _to_input(x), _to_input(z)

    G.set_trainable(True)
    D.set_trainable(False)
    gx = G(xt)
    use_d = state.weights.beta != 0
    d_gx = D(gx) if use_d else None
    gl = generator_loss(gx, zt, d_gx, state.weights)
    gl.total.backward()
    adam_step(G.parameters(), cfg.lr)

    d_loss = float("nan")
    if t % cfg.d_every == 0:
        D.set_trainable(True)
        d_fake = D(gx.detach())
        d_real = D(zt)
        dl = discriminator_loss(d_fake, d_real)
        dl.backward()
        adam_step(D.parameters(), cfg.lr_d)
        D.set_trainable(False)
        d_loss = dl.item()
        state.d_updates += 1

    if state.calibrated and state.weights.beta != 0:
        adv, l1, tv = gl.terms
        state.share_sums += np.array([adv, l1, tv, 1.0], dtype=np.float32)
    state.iteration = t
    state.last = (gl, d_loss)
    return state


def _log_row(state: TrainState) -> dict:
    gl, d_loss = state.last
    shares = state.loss_shares()
    return {
        "iteration": state.iteration,
        "l1": gl.l1,
        "tv": gl.tv,
        "adv": gl.adv,
        "d_loss": d_loss,
        "share_adv": shares["adv"],
        "share_l1": shares["l1"],
        "share_tv": shares["tv"],
    }


def generate(G: Generator, x: np.ndarray) -> np.ndarray:
    """Forward pass without building a graph; x is (n, h, w)."""
    trainable = [p.requires_grad for p in G.parameters()]
    G.set_trainable(False)
    try:
        return G(_to_input(x)).value[:, 0]
    finally:
        for p, flag in zip(G.parameters(), trainable):
            p.requires_grad = flag


def discriminate(D: Discriminator, x: np.ndarray) -> np.ndarray:
    D.set_trainable(False)
    return D(_to_input(x)).value[:, 0]


def probe_set(patches: PatchSet, cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    return [sample_batch(patches, cfg.batch, cfg.seed, j, stream=9) for j in range(cfg.probe_batches)]


def measure_terms(state: TrainState, probes) -> tuple[float, float, float]:
    """Mean L1, mean per-image TV and mean (1 - D(G(x)))^2 over probe batches."""
    l1s, tvs, advs = [], [], []
    for x, z in probes:
        gx = generate(state.generator, x)
        l1s.append(l1_loss(gx[:, None], z[:, None]).item())
        tvs.append(tv_loss(gx[:, None]).item())
        advs.append(adversarial_term(discriminate(state.discriminator, gx)).item())
    return float(np.mean(l1s)), float(np.mean(tvs)), float(np.mean(advs))


def calibrate_loss_weights(state: TrainState, probe_batches, use_measured_d: bool = True) -> LossWeights:
    """Pick alpha, beta so the weighted terms split 84 : 14 : 2 (adversarial : L1 : TV) on the probes.

    With ``use_measured_d`` the adversarial factor is the measured mean of
    (1 - D(G(x)))^2 (0.25 for an untrained discriminator); otherwise D(G(x)) = 0.5 is assumed.
    """
    l1, tv, adv = measure_terms(state, probe_batches)
    if l1 <= 0:
        raise ValueError("measured L1 is zero: probe batches are degenerate")
    return _f32_weights(weights_from_measurements(l1, tv, adv if use_measured_d else 0.25))


def measured_shares(state: TrainState, probe_batches, weights: LossWeights | None = None) -> dict[str, float]:
    w = weights or state.weights
    l1, tv, adv = measure_terms(state, probe_batches)
    terms = np.array([w.beta * adv, l1, w.alpha * tv])
    terms = terms / terms.sum()
    return {"adv": float(terms[0]), "l1": float(terms[1]), "tv": float(terms[2])}


def validation_l1(state: TrainState, val: PatchSet, max_patches: int = 64) -> float:
    n = min(len(val), max_patches)
    if n == 0:
        return float("nan")
    xs, zs = val.arrays(range(n))
    losses = []
    for i in range(0, n, 8):
        gx = generate(state.generator, xs[i : i + 8].astype(np.float32))
        losses.append(np.abs(gx - zs[i : i + 8]).mean() * len(gx))
    return float(np.sum(losses) / n)


LOG_FIELDS = ["iteration", "l1", "tv", "adv", "d_loss", "share_adv", "share_l1", "share_tv"]


def train(
    cfg: TrainConfig,
    train_set: PatchSet,
    val_set: PatchSet | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
) -> TrainState:
    """Run the iteration budget (optionally stopping early at ``stop_at``).

    With auto-calibration the first ``warmup_iterations`` use the L1 term only;
    then alpha and beta are calibrated on fixed probe batches.
    """
    if state is None:
        state = TrainState.load(resume, cfg) if resume else TrainState.initial(cfg)
        state.config = cfg
    out = Path(out_dir) if out_dir else None
    log_rows = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    if val_set is not None and state.iteration == 0:
        state.initial_val_l1 = validation_l1(state, val_set)
    while state.iteration < end:
        if not state.calibrated and state.iteration >= cfg.warmup_iterations:
            state.weights = calibrate_loss_weights(state, probe_set(train_set, cfg))
            state.calibrated = True
            log.info("calibrated alpha=%.4g beta=%.4g at iteration %d", state.weights.alpha, state.weights.beta, state.iteration)
        x, z = sample_batch(train_set, cfg.batch, cfg.seed, state.iteration + 1)
        train_step(state, x, z)
        if cfg.log_every and state.iteration % cfg.log_every == 0:
            log_rows.append(_log_row(state))
            r = log_rows[-1]
            log.info("it %d  l1 %.4f  tv %.1f  adv %.3f  d %.3f", r["iteration"], r["l1"], r["tv"], r["adv"], r["d_loss"])
        if out and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            state.save(out / f"ckpt_{state.iteration:06d}.bin")
    state.history.extend(log_rows)
    if val_set is not None:
        state.final_val_l1 = validation_l1(state, val_set)
    if out:
        state.save(out / "final.bin")
        new_file = not (out / "train_log.csv").exists()
        with open(out / "train_log.csv", "a", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new_file:
                wr.writeheader()
            wr.writerows(log_rows)
    return state


# --------------------------------------------------------------------------
# inference


def _tile_starts(n: int, tile: int, overlap: int, align: int = 1) -> list[int]:
    """Tile origins on multiples of ``align``; the last tile is stretched to reach the end."""
    if n <= tile:
        return [0]
    step = (tile - overlap) // align * align
    if step < 1:
        raise ValueError(f"overlap {overlap} leaves no stride for {tile}-px tiles")
    starts = list(range(0, n - tile, step))
    last = (n - tile) // align * align
    if last > starts[-1]:
        starts.append(last)
    return starts


def _ramp(n: int, overlap: int, lo_edge: bool, hi_edge: bool) -> np.ndarray:
    i = np.arange(n) + 0.5
    r = np.ones(n)
    if overlap > 0:
        if not lo_edge:
            r = np.minimum(r, i / overlap)
        if not hi_edge:
            r = np.minimum(r, (n - i) / overlap)
    return r


def run_generator(G: Generator, x: np.ndarray, tile: int | None = None, overlap: int = 16,
                  context: int | None = None) -> np.ndarray:
    """Apply G to a full 2-D image, padded (replicate) to the U-Net multiple.

    With ``tile``, the image is processed in tiles blended linearly over ``overlap`` pixels.
    Each tile is run with ``context`` extra pixels on every side (default: the generator's
    receptive radius), so its kept core sees the same neighbourhood as an untiled pass.
    """
    h, w = x.shape
    m = G.min_multiple
    if min(h, w) < 2 * m:
        raise ValueError(f"image {h}x{w} too small for a {G.levels}-level U-Net (min {2 * m} px per side)")
    if tile is None:
        ph, pw = -h % m, -w % m
        xp = np.pad(x, ((0, ph), (0, pw)), mode="edge")
        return generate(G, xp[None].astype(np.float32))[0, :h, :w].astype(np.float64)
    if tile % m:
        raise ValueError(f"tile size must be a multiple of {m}")
    ctx = G.receptive_radius if context is None else context
    ctx = -(-ctx // m) * m  # halo on the down-sampling grid
    acc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    rows, cols = _tile_starts(h, tile, overlap, m), _tile_starts(w, tile, overlap, m)
    for i, r in enumerate(rows):
        r_end = rows[i + 1] + overlap if i + 1 < len(rows) else h
        r_end = min(max(r_end, r + tile), h)
        for j, c in enumerate(cols):
            c_end = cols[j + 1] + overlap if j + 1 < len(cols) else w
            c_end = min(max(c_end, c + tile), w)
            r0, c0 = max(r - ctx, 0), max(c - ctx, 0)
            block = x[r0 : min(r_end + ctx, h), c0 : min(c_end + ctx, w)]
            y = run_generator(G, block)[r - r0 : r_end - r0, c - c0 : c_end - c0]
            wt = np.outer(_ramp(r_end - r, overlap, r == 0, r_end == h), _ramp(c_end - c, overlap, c == 0, c_end == w))
            acc[r:r_end, c:c_end] += y * wt
            wsum[r:r_end, c:c_end] += wt
    return acc / wsum


def infer(state: TrainState | Generator, lr_image: ImageGrid, tile: int | None = None, overlap: int = 16,
          max_untiled_px: int = 1024 * 1024) -> ImageGrid:
    """Super-resolve a raw LR acquisition: 2x Lanczos up-sampling, then one generator pass, clamped to [0, 1]."""
    G = state.generator if isinstance(state, TrainState) else state
    x = lanczos_upsample(lr_image, 2)
    if tile is None and x.height * x.width > max_untiled_px:
        tile = 128
    y = run_generator(G, x.data, tile, overlap)
    return ImageGrid(np.clip(y, 0.0, 1.0), x.pitch_nm)
