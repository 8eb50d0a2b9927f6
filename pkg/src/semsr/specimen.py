"""Synthetic gold-on-carbon specimen: particle fields, HR rendering and LR degradation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imaging import ImageGrid, bin_downsample, gaussian_blur, sample_bilinear

RADIUS_MIN_NM = 2.5
RADIUS_MAX_NM = 75.0
BACKGROUND = 0.1
PARTICLE_LEVEL = 0.9
PARTICLE_JITTER = 0.05
SUBSAMPLES = 4
MAX_PLACEMENT_TRIES = 2000


class PlacementError(RuntimeError):
    """No-overlap placement could not be satisfied within the retry budget."""


@dataclass(frozen=True)
class Particle:
    cx_nm: float
    cy_nm: float
    radius_nm: float


@dataclass(frozen=True)
class ParticleField:
    field_w_nm: float
    field_h_nm: float
    particles: tuple[Particle, ...] = ()

    def to_json(self) -> dict:
        return {
            "field_w_nm": self.field_w_nm,
            "field_h_nm": self.field_h_nm,
            "particles": [asdict(p) for p in self.particles],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParticleField":
        return cls(obj["field_w_nm"], obj["field_h_nm"], tuple(Particle(**p) for p in obj["particles"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ParticleField":
        return cls.from_json(json.loads(Path(path).read_text()))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Centres and radii as float arrays (cx, cy, r), in nm."""
        if not self.particles:
            z = np.zeros(0)
            return z, z, z
        a = np.array([(p.cx_nm, p.cy_nm, p.radius_nm) for p in self.particles])
        return a[:, 0], a[:, 1], a[:, 2]


@dataclass(frozen=True)
class Misalign:
    rot_deg: float = 0.0
    scale: float = 1.0
    tx_px: float = 0.0
    ty_px: float = 0.0
    elastic_amp_px: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == Misalign()


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    particle_count: int = 150
    radius_range_nm: tuple[float, float] = (RADIUS_MIN_NM, RADIUS_MAX_NM)
    hr_pitch_nm: float = 7.1
    hr_height: int = 256
    hr_width: int = 256
    psf_sigma_nm: float = 3.5
    lr_extra_blur_nm: float = 0.0
    noise_std: float = 0.0
    misalign: Misalign = field(default_factory=Misalign)
    no_overlap: bool = True
    # acquisition settings kept only as descriptive metadata
    accel_kv: float = 10.0
    beam_na: float = 0.54
    dwell_us: float = 30.0

    def __post_init__(self):
        lo, hi = self.radius_range_nm
        if not (RADIUS_MIN_NM <= lo <= hi <= RADIUS_MAX_NM):
            raise ValueError(f"radius_range_nm {self.radius_range_nm} must lie within [2.5, 75] nm")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.particle_count < 0:
            raise ValueError("particle_count must be >= 0")
        if isinstance(self.misalign, dict):
            object.__setattr__(self, "misalign", Misalign(**self.misalign))
        object.__setattr__(self, "radius_range_nm", (float(lo), float(hi)))

    @property
    def field_w_nm(self) -> float:
        return self.hr_width * self.hr_pitch_nm

    @property
    def field_h_nm(self) -> float:
        return self.hr_height * self.hr_pitch_nm

    def replace(self, **changes) -> "SimConfig":
        d = asdict(self)
        d["misalign"] = Misalign(**d["misalign"])
        d.update(changes)
        return SimConfig(**d)


# independent RNG streams per stage so that e.g. changing the noise level
# does not move the particles
_STREAM_FIELD, _STREAM_RENDER, _STREAM_HR_NOISE, _STREAM_LR_NOISE, _STREAM_WARP = range(5)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def sample_field(cfg: SimConfig) -> ParticleField:
    """Draw ``particle_count`` particles with log-uniform radii and uniform centres."""
    rng = _rng(cfg.seed, _STREAM_FIELD)
    n = cfg.particle_count
    lo, hi = cfg.radius_range_nm
    radii = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))
    w, h = cfg.field_w_nm, cfg.field_h_nm
    if not cfg.no_overlap:
        cx = rng.uniform(0, w, size=n)
        cy = rng.uniform(0, h, size=n)
        return ParticleField(w, h, tuple(Particle(*t) for t in zip(cx.tolist(), cy.tolist(), radii.tolist())))

    # place big particles first; report in draw order
    cx = np.empty(n)
    cy = np.empty(n)
    placed: list[int] = []
    for i in np.argsort(-radii, kind="stable"):
        for _ in range(MAX_PLACEMENT_TRIES):
            x, y = rng.uniform(0, w), rng.uniform(0, h)
            if placed:
                idx = np.array(placed)
                d = np.hypot(cx[idx] - x, cy[idx] - y)
                if np.any(d < 0.9 * (radii[idx] + radii[i])):
                    continue
            cx[i], cy[i] = x, y
            placed.append(i)
            break
        else:
            raise PlacementError(
                f"could not place particle {len(placed) + 1}/{n} without overlap "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )
    return ParticleField(w, h, tuple(Particle(*t) for t in zip(cx.tolist(), cy.tolist(), radii.tolist())))


def disk_coverage(height: int, width: int, pitch_nm: float, cx_nm: float, cy_nm: float, r_nm: float):
    """Fractional disk coverage via SUBSAMPLES x SUBSAMPLES point sampling per pixel.

    Returns ``(r0, c0, cov)`` where ``cov`` covers the disk's bounding box clipped to the raster.
    Pixel (i, j) spans [j, j+1) x [i, i+1) in pixel units, so its centre is at (j+0.5)*pitch nm.
    """
    cxp, cyp, rp = cx_nm / pitch_nm, cy_nm / pitch_nm, r_nm / pitch_nm
    r0 = max(int(math.floor(cyp - rp)), 0)
    r1 = min(int(math.ceil(cyp + rp)) + 1, height)
    c0 = max(int(math.floor(cxp - rp)), 0)
    c1 = min(int(math.ceil(cxp + rp)) + 1, width)
    if r0 >= r1 or c0 >= c1:
        return r0, c0, np.zeros((0, 0))
    offs = (np.arange(SUBSAMPLES) + 0.5) / SUBSAMPLES
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).ravel()
    inside = ((ys[:, None] - cyp) ** 2 + (xs[None, :] - cxp) ** 2) <= rp * rp
    cov = inside.reshape(r1 - r0, SUBSAMPLES, c1 - c0, SUBSAMPLES).mean(axis=(1, 3))
    return r0, c0, cov


def render_hr(field_: ParticleField, cfg: SimConfig) -> ImageGrid:
    """Render the high-resolution acquisition of a particle field."""
    h, w, pitch = cfg.hr_height, cfg.hr_width, cfg.hr_pitch_nm
    if h < 8 or w < 8:
        raise ValueError("raster too small (needs >= 8x8)")
    if field_.field_w_nm > w * pitch + 1e-6 or field_.field_h_nm > h * pitch + 1e-6:
        raise ValueError("particle field does not fit in the configured raster")
    rng = _rng(cfg.seed, _STREAM_RENDER)
    levels = PARTICLE_LEVEL + rng.uniform(-PARTICLE_JITTER, PARTICLE_JITTER, size=len(field_.particles))
    img = np.full((h, w), BACKGROUND)
    for p, level in zip(field_.particles, levels):
        r0, c0, cov = disk_coverage(h, w, pitch, p.cx_nm, p.cy_nm, p.radius_nm)
        if cov.size == 0:
            continue
        win = img[r0 : r0 + cov.shape[0], c0 : c0 + cov.shape[1]]
        np.maximum(win, BACKGROUND + cov * (level - BACKGROUND), out=win)
    out = gaussian_blur(ImageGrid(img, pitch), cfg.psf_sigma_nm).data
    if cfg.noise_std > 0:
        out = out + _rng(cfg.seed, _STREAM_HR_NOISE).normal(0.0, cfg.noise_std, size=out.shape)
    return ImageGrid(np.clip(out, 0.0, 1.0), pitch)


def smooth_field(shape: tuple[int, int], amplitude: float, rng: np.random.Generator, n_waves: int = 3):
    """Random smooth displacement (dy, dx) built from a few long-wavelength sinusoids, max |d| == amplitude."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    comps = []
    for _ in range(2):
        acc = np.zeros(shape)
        for _ in range(n_waves):
            # wavelengths between one and two field sizes keep the warp smooth at block scale
            theta = rng.uniform(0, 2 * np.pi)
            lam = rng.uniform(1.0, 2.0) * max(h, w)
            phase = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / lam + phase)
        comps.append(acc)
    dy, dx = comps
    mag = np.hypot(dy, dx).max()
    if mag == 0 or amplitude == 0:
        return np.zeros(shape), np.zeros(shape)
    return dy * amplitude / mag, dx * amplitude / mag


def misalignment_map(cfg: SimConfig, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) coordinates sampled by the LR misalignment warp.

    The warp is ``lr(p) = lr0(T(p))`` with T = rotation/scale about the image
    centre, plus translation (tx, ty), plus a smooth elastic displacement.
    """
    m = cfg.misalign
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(m.rot_deg)
    a, b = m.scale * math.cos(th), -m.scale * math.sin(th)
    c, d = m.scale * math.sin(th), m.scale * math.cos(th)
    src_x = a * (xx - cx) + b * (yy - cy) + cx + m.tx_px
    src_y = c * (xx - cx) + d * (yy - cy) + cy + m.ty_px
    if m.elastic_amp_px > 0:
        ey, ex = smooth_field(shape, m.elastic_amp_px, _rng(cfg.seed, _STREAM_WARP))
        src_x = src_x + ex
        src_y = src_y + ey
    return src_y, src_x


def degrade_to_lr(hr: ImageGrid, cfg: SimConfig) -> ImageGrid:
    """Low-magnification acquisition: optional blur, 2x pixel binning, noise, misalignment."""
    if hr.height % 2 or hr.width % 2:
        raise ValueError("HR dimensions must be even")
    lr = bin_downsample(gaussian_blur(hr, cfg.lr_extra_blur_nm), 2)
    data = lr.data
    if cfg.noise_std > 0:
        data = data + _rng(cfg.seed, _STREAM_LR_NOISE).normal(0.0, cfg.noise_std, size=data.shape)
    if not cfg.misalign.is_identity:
        rows, cols = misalignment_map(cfg, data.shape)
        data = sample_bilinear(data, rows, cols)
    return ImageGrid(np.clip(data, 0.0, 1.0), lr.pitch_nm)


def make_dataset(cfg: SimConfig, n_pairs: int) -> list[tuple[ImageGrid, ImageGrid, ParticleField]]:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out = []
    for i in range(n_pairs):
        c = cfg.replace(seed=cfg.seed + i)
        fld = sample_field(c)
        hr = render_hr(fld, c)
        out.append((degrade_to_lr(hr, c), hr, fld))
    return out
