"""Image container, resampling and file I/O shared by the rest of the package."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LANCZOS_A = 3


@dataclass(frozen=True)
class ImageGrid:
    """2-D intensity raster with a physical pixel pitch in nanometres."""

    data: np.ndarray
    pitch_nm: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"ImageGrid needs a 2-D array, got shape {data.shape}")
        if not (math.isfinite(self.pitch_nm) and self.pitch_nm > 0):
            raise ValueError(f"pitch_nm must be positive and finite, got {self.pitch_nm}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pitch_nm", float(self.pitch_nm))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "ImageGrid":
        return ImageGrid(data, self.pitch_nm)


def normalize(img: ImageGrid) -> ImageGrid:
    """Linearly stretch intensities to [0, 1]; a flat image maps to zeros."""
    lo, hi = float(img.data.min()), float(img.data.max())
    if hi == lo:
        return img.with_data(np.zeros_like(img.data))
    return img.with_data((img.data - lo) / (hi - lo))


def clamp01(img: ImageGrid) -> ImageGrid:
    return img.with_data(np.clip(img.data, 0.0, 1.0))


# --------------------------------------------------------------------------
# I/O


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, each separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary (P5) PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval not in (255, 65535):
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = width * height
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(height, width)
    return arr, maxval


def load_image(path: str | Path, pitch_nm: float | None = None) -> ImageGrid:
    """Load an 8- or 16-bit grayscale PNG or P5 PGM as intensities in [0, 1].

    The pitch comes from ``pitch_nm`` if given, otherwise from the sidecar
    ``<stem>.meta.json`` file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        arr, maxval = _read_pgm(path)
    else:
        with Image.open(path) as im:
            if im.mode == "L":
                maxval = 255
            elif im.mode in ("I;16", "I;16B", "I;16L"):
                maxval = 65535
            else:
                raise ValueError(f"{path}: unsupported image mode {im.mode!r} (grayscale 8/16-bit only)")
            arr = np.array(im)
    if pitch_nm is None:
        mpath = meta_path(path)
        if not mpath.exists():
            raise ValueError(f"{path}: no pitch given and no sidecar {mpath.name}")
        pitch_nm = json.loads(mpath.read_text())["pitch_nm"]
    return ImageGrid(arr.astype(np.float64) / maxval, pitch_nm)


def to_uint16(data: np.ndarray) -> np.ndarray:
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1] before saving")
    # round half up
    return np.floor(np.asarray(data) * 65535.0 + 0.5).astype(np.uint16)


def save_image(img: ImageGrid, path: str | Path) -> None:
    """Write a 16-bit grayscale PNG plus the pitch sidecar."""
    path = Path(path)
    stored = to_uint16(img.data)
    Image.fromarray(stored).save(path, format="PNG")
    meta_path(path).write_text(json.dumps({"pitch_nm": img.pitch_nm}))


# --------------------------------------------------------------------------
# resampling


def lanczos_kernel(x, a: int = LANCZOS_A):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def _lanczos_matrix(n_in: int, factor: int, a: int = LANCZOS_A) -> np.ndarray:
    # output sample j sits at input coordinate (j + 0.5)/factor - 0.5 (pixel-centre alignment)
    n_out = n_in * factor
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(u).astype(int)
    taps = np.arange(-a + 1, a + 1)
    idx = base[:, None] + taps[None, :]
    w = lanczos_kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps.size)
    np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def lanczos_upsample(img: ImageGrid, factor: int) -> ImageGrid:
    """Separable Lanczos-3 up-sampling with replicate edges, clamped to [0, 1]."""
    if factor < 2:
        raise ValueError("factor must be >= 2")
    if img.height < 8 or img.width < 8:
        raise ValueError("image too small for the Lanczos kernel support (needs >= 8x8)")
    my = _lanczos_matrix(img.height, factor)
    mx = _lanczos_matrix(img.width, factor)
    out = my @ img.data @ mx.T
    return ImageGrid(np.clip(out, 0.0, 1.0), img.pitch_nm / factor)


def bin_downsample(img: ImageGrid, factor: int) -> ImageGrid:
    if factor < 2:
        raise ValueError("factor must be >= 2")
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by {factor}")
    out = img.data.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return ImageGrid(out, img.pitch_nm * factor)


def crop_offsets(height: int, width: int, h: int, w: int) -> tuple[int, int]:
    if h > height or w > width or h < 1 or w < 1:
        raise ValueError(f"cannot crop {h}x{w} from {height}x{width}")
    return (height - h) // 2, (width - w) // 2


def crop_center(img: ImageGrid, h: int, w: int) -> ImageGrid:
    r0, c0 = crop_offsets(img.height, img.width, h, w)
    return img.with_data(img.data[r0 : r0 + h, c0 : c0 + w])


def crop(img: ImageGrid, r0: int, c0: int, h: int, w: int) -> ImageGrid:
    if r0 < 0 or c0 < 0 or r0 + h > img.height or c0 + w > img.width:
        raise ValueError("crop window outside the image")
    return img.with_data(img.data[r0 : r0 + h, c0 : c0 + w])


def gaussian_blur(img: ImageGrid, sigma_nm: float) -> ImageGrid:
    if sigma_nm <= 0:
        return img
    return img.with_data(ndimage.gaussian_filter(img.data, sigma_nm / img.pitch_nm, mode="nearest"))


def sample_bilinear(data: np.ndarray, rows, cols) -> np.ndarray:
    """Bilinear samples at fractional (row, col) positions; outside samples replicate the edge."""
    coords = np.stack([np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)])
    return ndimage.map_coordinates(data, coords, order=1, mode="nearest")
