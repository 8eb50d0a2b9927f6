"""Co-registration of LR/HR pairs: Lanczos up-sampling, global affine fit, block-pyramid elastic refinement.

Coordinates are (row, col) pixel indices with pixel centres on integers.
Transforms map *output* pixel positions to *source* positions, so warping
an image means ``out(p) = src(T(p))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import ImageGrid, bin_downsample, crop, crop_center, lanczos_upsample, sample_bilinear

DISPLACEMENT_CAP_PX = 8.0
CONFIDENCE_FLOOR = 0.2
DET_RANGE = (0.5, 2.0)


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix [[a, b, tx], [c, d, ty]] acting on (x=col, y=row): src = M @ (x, y, 1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    @classmethod
    def about_center(cls, shape, rot_deg=0.0, scale=1.0, tx=0.0, ty=0.0) -> "AffineTransform":
        """Rotation/scale about the image centre followed by a translation (tx, ty) in pixels."""
        h, w = shape
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        th = math.radians(rot_deg)
        lin = scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        ctr = np.array([cx, cy])
        off = ctr - lin @ ctr + np.array([tx, ty])
        return cls(np.column_stack([lin, off]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    @property
    def angle_deg(self) -> float:
        return math.degrees(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))

    @property
    def scale(self) -> float:
        return math.sqrt(abs(self.det))

    def center_translation(self, shape) -> np.ndarray:
        """Translation (tx, ty) left over after removing rotation/scale about the image centre."""
        h, w = shape
        ctr = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        return self.linear @ ctr + self.translation - ctr

    def check(self) -> None:
        det = self.det
        if not (np.all(np.isfinite(self.matrix)) and DET_RANGE[0] <= det <= DET_RANGE[1]):
            raise RegistrationError(f"degenerate affine transform (det={det:.4g})")

    def source_coords(self, shape) -> tuple[np.ndarray, np.ndarray]:
        h, w = shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        (a, b, tx), (c, d, ty) = self.matrix
        return c * xx + d * yy + ty, a * xx + b * yy + tx

    def to_json(self) -> list:
        return self.matrix.tolist()


@dataclass
class DisplacementField:
    """Per-pixel (dy, dx) displacement; the warped image is ``moving(p + d(p))``."""

    dy: np.ndarray
    dx: np.ndarray
    levels: int
    block_centers: tuple[np.ndarray, np.ndarray] = ()
    block_values: tuple[np.ndarray, np.ndarray] = ()

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dy, self.dx)


@dataclass
class RegistrationReport:
    rmse_before: float
    rmse_after: float
    affine: AffineTransform
    residual_p95: float
    crop_box: tuple[int, int, int, int]  # r0, c0, h, w in up-sampled LR pixels
    displacement: DisplacementField | None = field(default=None, repr=False)

    @property
    def accepted(self) -> bool:
        return self.rmse_after <= self.rmse_before

    def to_json(self) -> dict:
        return {
            "rmse_before": self.rmse_before,
            "rmse_after": self.rmse_after,
            "accepted": self.accepted,
            "affine": self.affine.to_json(),
            "residual_p95": self.residual_p95,
            "crop_box": list(self.crop_box),
        }


# --------------------------------------------------------------------------
# correlation primitives


def _hann2d(h: int, w: int) -> np.ndarray:
    return np.outer(np.hanning(h), np.hanning(w))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    if den == 0:
        return 0.0
    return float((a * b).sum() / den)


def _parabolic(cm: float, c0: float, cp: float) -> float:
    den = cm - 2 * c0 + cp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / den, -0.5, 0.5))


def phase_correlation(
    ref: np.ndarray, moving: np.ndarray, window: bool = True, whiten: float = 1.0
) -> tuple[float, float, float]:
    """Shift (dy, dx) of ``moving``'s content relative to ``ref``: moving(p) ~ ref(p - s).

    ``whiten`` is the exponent of the cross-power magnitude normalisation:
    1 gives classic phase correlation, 0 plain (Fourier-domain) cross-correlation,
    which has a broader but far less noise-sensitive peak on small blocks.
    Returns (dy, dx, peak) with parabolic sub-pixel refinement.
    """
    h, w = ref.shape
    a = ref - ref.mean()
    b = moving - moving.mean()
    if window:
        win = _hann2d(h, w)
        a = a * win
        b = b * win
    fa = np.fft.rfft2(a)
    fb = np.fft.rfft2(b)
    cross = fb * np.conj(fa)
    if whiten > 0:
        mag = np.abs(cross)
        cross = np.where(mag > 1e-12 * max(mag.max(), 1e-300), cross / np.maximum(mag, 1e-300) ** whiten, 0)
    surf = np.fft.irfft2(cross, s=(h, w))
    iy, ix = np.unravel_index(int(np.argmax(surf)), surf.shape)
    peak = float(surf[iy, ix])
    sy = _parabolic(surf[(iy - 1) % h, ix], peak, surf[(iy + 1) % h, ix])
    sx = _parabolic(surf[iy, (ix - 1) % w], peak, surf[iy, (ix + 1) % w])
    dy = iy + sy
    dx = ix + sx
    if dy > h / 2:
        dy -= h
    if dx > w / 2:
        dx -= w
    return float(dy), float(dx), peak


# --------------------------------------------------------------------------
# global affine


def apply_affine(img: ImageGrid, t: AffineTransform) -> ImageGrid:
    """Bilinear resampling ``out(p) = img(T p)`` with replicate edges."""
    t.check()
    rows, cols = t.source_coords(img.shape)
    return img.with_data(sample_bilinear(img.data, rows, cols))


def _interior(a: np.ndarray, frac: float = 0.1) -> np.ndarray:
    h, w = a.shape
    my, mx = max(1, int(h * frac)), max(1, int(w * frac))
    return a[my : h - my, mx : w - mx]


def _fit_for(ref: np.ndarray, moving: np.ndarray, rot: float, scale: float) -> tuple[float, AffineTransform]:
    lin_only = AffineTransform.about_center(ref.shape, rot, scale)
    rows, cols = lin_only.source_coords(ref.shape)
    warped = sample_bilinear(moving, rows, cols)
    dy, dx, _ = phase_correlation(ref, warped)
    # warped(p) ~ ref(p - s)  =>  ref(p) ~ moving(L(p + s - c) + c)
    t_xy = lin_only.linear @ np.array([dx, dy])
    t = AffineTransform.about_center(ref.shape, rot, scale, t_xy[0], t_xy[1])
    rows, cols = t.source_coords(ref.shape)
    score = ncc(_interior(ref), _interior(sample_bilinear(moving, rows, cols)))
    return score, t


def _grid_search(ref, moving, rots, scales):
    best = (-np.inf, None, 0.0, 1.0)
    scores = np.full((len(rots), len(scales)), -np.inf)
    for i, r in enumerate(rots):
        for j, s in enumerate(scales):
            sc, t = _fit_for(ref, moving, float(r), float(s))
            scores[i, j] = sc
            if sc > best[0]:
                best = (sc, t, float(r), float(s))
    return best, scores


def estimate_affine(
    ref: ImageGrid,
    moving: ImageGrid,
    rot_range_deg: float = 3.0,
    rot_step_deg: float = 0.1,
    scale_range: tuple[float, float] = (0.96, 1.04),
    scale_step: float = 0.005,
    confidence_floor: float = CONFIDENCE_FLOOR,
) -> AffineTransform:
    """Global rotation/scale/translation aligning ``moving`` onto ``ref``.

    Translation comes from phase correlation; rotation and scale from a
    coarse (half resolution) then fine grid search maximising NCC, finished
    with a parabolic refinement of the fine-grid optimum.
    """
    if ref.shape != moving.shape or not math.isclose(ref.pitch_nm, moving.pitch_nm, rel_tol=1e-6):
        raise ValueError("estimate_affine needs images with the same dims and pitch")
    if ref.data.std() < 1e-8 or moving.data.std() < 1e-8:
        raise RegistrationError("flat image: no correlation structure to register")

    h, w = ref.shape
    a, b = ref.data, moving.data
    # coarse stage on 2x binned copies
    hc, wc = h - h % 2, w - w % 2
    if min(hc, wc) >= 64:
        ca = bin_downsample(ImageGrid(a[:hc, :wc], 1.0), 2).data
        cb = bin_downsample(ImageGrid(b[:hc, :wc], 1.0), 2).data
    else:
        ca, cb = a, b
    coarse_rots = np.arange(-rot_range_deg, rot_range_deg + 1e-9, 0.5)
    coarse_scales = np.arange(scale_range[0], scale_range[1] + 1e-9, 0.02)
    (_, _, r0, s0), _ = _grid_search(ca, cb, coarse_rots, coarse_scales)

    rots = r0 + np.arange(-5, 6) * rot_step_deg
    scales = s0 + np.arange(-4, 5) * scale_step
    rots = rots[np.abs(rots) <= rot_range_deg + 1e-9]
    scales = scales[(scales >= scale_range[0] - 1e-9) & (scales <= scale_range[1] + 1e-9)]
    (best, t, rb, sb), scores = _grid_search(a, b, rots, scales)
    if best < confidence_floor:
        raise RegistrationError(f"correlation {best:.3f} below confidence floor {confidence_floor}")

    i = int(np.where(np.isclose(rots, rb))[0][0])
    j = int(np.where(np.isclose(scales, sb))[0][0])
    r_ref, s_ref = rb, sb
    if 0 < i < len(rots) - 1:
        r_ref = rb + rot_step_deg * _parabolic(scores[i - 1, j], scores[i, j], scores[i + 1, j])
    if 0 < j < len(scales) - 1:
        s_ref = sb + scale_step * _parabolic(scores[i, j - 1], scores[i, j], scores[i, j + 1])
    if (r_ref, s_ref) != (rb, sb):
        sc, t2 = _fit_for(a, b, r_ref, s_ref)
        if sc >= best:
            t = t2
    t.check()
    return t


# --------------------------------------------------------------------------
# elastic


def _block_edges(n_px: int, n_blocks: int) -> np.ndarray:
    return (np.arange(n_blocks + 1) * n_px) // n_blocks


def interpolate_blocks(values: np.ndarray, cy: np.ndarray, cx: np.ndarray, shape) -> np.ndarray:
    """Bilinear interpolation of block-centre values to every pixel, edge values held constant outside."""
    h, w = shape
    rows = np.array([np.interp(np.arange(w), cx, v) for v in values]) if len(cx) > 1 else np.repeat(values, w, axis=1)
    if len(cy) == 1:
        return np.repeat(rows, h, axis=0)
    ys = np.arange(h)
    out = np.empty((h, w))
    for j in range(w):
        out[:, j] = np.interp(ys, cy, rows[:, j])
    return out


def _fill_invalid(res: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace unconfident block residuals by averaging confident neighbours (repeated diffusion)."""
    if valid.all():
        return res
    if not valid.any():
        return np.zeros_like(res)
    res = res.copy()
    valid = valid.copy()
    ny, nx = valid.shape
    while not valid.all():
        new_valid = valid.copy()
        for i, j in zip(*np.nonzero(~valid)):
            sl = (slice(max(i - 1, 0), i + 2), slice(max(j - 1, 0), j + 2))
            v = valid[sl]
            if v.any():
                res[i, j] = res[sl][v].mean()
                new_valid[i, j] = True
        valid = new_valid
    return res


def warp_displacement(img: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(img, yy + dy, xx + dx)


def pyramid_elastic_register(
    ref: ImageGrid,
    moving: ImageGrid,
    levels: int = 4,
    min_block: int = 32,
    cap_px: float = DISPLACEMENT_CAP_PX,
    confidence_floor: float = CONFIDENCE_FLOOR,
    iterations: int = 2,
) -> DisplacementField:
    """Coarse-to-fine block matching.

    Level k tiles the image into 2^k x 2^k blocks; every block's residual
    translation is found by Hann-masked phase correlation against the
    currently warped ``moving``. Block values are carried at block centres
    and bilinearly interpolated to a full-resolution field.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min_block < 16:
        raise ValueError("min_block must be >= 16")
    if ref.shape != moving.shape:
        raise ValueError("ref and moving must have the same dims")
    h, w = ref.shape
    a, b = ref.data, moving.data
    dy = np.zeros((h, w))
    dx = np.zeros((h, w))
    used = 0
    centers: tuple = ()
    values: tuple = ()
    for k in range(levels):
        n = 2**k
        ey, ex = _block_edges(h, n), _block_edges(w, n)
        if np.diff(ey).min() < min_block or np.diff(ex).min() < min_block:
            break
        used = k + 1
        cy = (ey[:-1] + ey[1:] - 1) / 2.0
        cx = (ex[:-1] + ex[1:] - 1) / 2.0
        by = sample_bilinear(dy, *np.meshgrid(cy, cx, indexing="ij"))
        bx = sample_bilinear(dx, *np.meshgrid(cy, cx, indexing="ij"))
        for _ in range(iterations):
            warped = warp_displacement(b, dy, dx)
            ry = np.zeros((n, n))
            rx = np.zeros((n, n))
            valid = np.zeros((n, n), dtype=bool)
            for i in range(n):
                for j in range(n):
                    rb = a[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
                    mb = warped[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
                    if rb.std() < 1e-6 or mb.std() < 1e-6:
                        continue
                    sy, sx, _ = phase_correlation(rb, mb, whiten=0.0)
                    # moving content displaced by s => sample moving at p + s
                    yy, xx = np.mgrid[ey[i] : ey[i + 1], ex[j] : ex[j + 1]].astype(np.float64)
                    cand = sample_bilinear(b, yy + by[i, j] + sy, xx + bx[i, j] + sx)
                    if ncc(rb, cand) >= confidence_floor:
                        ry[i, j], rx[i, j] = sy, sx
                        valid[i, j] = True
            ry = _fill_invalid(ry, valid)
            rx = _fill_invalid(rx, valid)
            by = by + ry
            bx = bx + rx
            mag = np.hypot(by, bx)
            over = mag > cap_px
            if over.any():
                by[over] *= cap_px / mag[over]
                bx[over] *= cap_px / mag[over]
            dy = interpolate_blocks(by, cy, cx, (h, w))
            dx = interpolate_blocks(bx, cy, cx, (h, w))
        centers = (cy, cx)
        values = (by.copy(), bx.copy())
    return DisplacementField(dy, dx, used, centers, values)


# --------------------------------------------------------------------------
# full chain


def total_warp(affine: AffineTransform, disp: DisplacementField) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) in the HR image for each output pixel: A(p + d(p))."""
    h, w = disp.dy.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    py, px = yy + disp.dy, xx + disp.dx
    (a, b, tx), (c, d, ty) = affine.matrix
    return c * px + d * py + ty, a * px + b * py + tx


def valid_box(src_rows: np.ndarray, src_cols: np.ndarray, src_shape) -> tuple[int, int, int, int]:
    """Largest box (shrunk side by side) whose source samples all fall inside the source image."""
    sh, sw = src_shape
    ok = (src_rows >= 0) & (src_rows <= sh - 1) & (src_cols >= 0) & (src_cols <= sw - 1)
    r0, c0, r1, c1 = 0, 0, ok.shape[0], ok.shape[1]
    while r1 - r0 > 1 and c1 - c0 > 1:
        win = ok[r0:r1, c0:c1]
        bad = {
            "top": (~win[0]).sum(),
            "bottom": (~win[-1]).sum(),
            "left": (~win[:, 0]).sum(),
            "right": (~win[:, -1]).sum(),
        }
        side = max(bad, key=bad.get)
        if bad[side] == 0:
            break
        if side == "top":
            r0 += 1
        elif side == "bottom":
            r1 -= 1
        elif side == "left":
            c0 += 1
        else:
            c1 -= 1
    return r0, c0, r1 - r0, c1 - c0


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def residual_shift_p95(ref: np.ndarray, moving: np.ndarray, block: int = 48) -> float:
    """95th percentile of per-block residual shifts between two aligned images."""
    h, w = ref.shape
    shifts = []
    for r in range(0, h - block + 1, block):
        for c in range(0, w - block + 1, block):
            rb = ref[r : r + block, c : c + block]
            mb = moving[r : r + block, c : c + block]
            if rb.std() < 1e-3 or mb.std() < 1e-3 or ncc(rb, mb) < CONFIDENCE_FLOOR:
                continue
            sy, sx, _ = phase_correlation(rb, mb, whiten=0.0)
            shifts.append(math.hypot(sy, sx))
    if not shifts:
        return 0.0
    return float(np.percentile(shifts, 95))


def harmonize(lr: ImageGrid, hr: ImageGrid) -> tuple[ImageGrid, ImageGrid]:
    """Centre-crop so that hr dims == 2 x lr dims."""
    h = min(lr.height, hr.height // 2)
    w = min(lr.width, hr.width // 2)
    if (lr.height, lr.width) != (h, w):
        lr = crop_center(lr, h, w)
    if (hr.height, hr.width) != (2 * h, 2 * w):
        hr = crop_center(hr, 2 * h, 2 * w)
    return lr, hr


def register_pair(
    lr: ImageGrid,
    hr: ImageGrid,
    levels: int = 4,
    min_block: int = 32,
    **affine_kw,
) -> tuple[ImageGrid, ImageGrid, RegistrationReport]:
    """Up-sample ``lr`` and warp ``hr`` onto its grid; both returned cropped to the valid region."""
    lr, hr = harmonize(lr, hr)
    x = lanczos_upsample(lr, 2)
    if not math.isclose(x.pitch_nm, hr.pitch_nm, rel_tol=1e-3):
        raise ValueError(f"pitch mismatch after up-sampling: {x.pitch_nm} vs {hr.pitch_nm}")
    hr = ImageGrid(hr.data, x.pitch_nm)
    affine = estimate_affine(x, hr, **affine_kw)
    disp = pyramid_elastic_register(x, apply_affine(hr, affine), levels=levels, min_block=min_block)
    rows, cols = total_warp(affine, disp)
    z_full = sample_bilinear(hr.data, rows, cols)
    box = valid_box(rows, cols, hr.shape)
    r0, c0, bh, bw = box
    xc = crop(x, r0, c0, bh, bw)
    zc = crop(x.with_data(z_full), r0, c0, bh, bw)
    before = rmse(xc.data, hr.data[r0 : r0 + bh, c0 : c0 + bw])
    after = rmse(xc.data, zc.data)
    report = RegistrationReport(
        rmse_before=before,
        rmse_after=after,
        affine=affine,
        residual_p95=residual_shift_p95(xc.data, zc.data),
        crop_box=box,
        displacement=disp,
    )
    return xc, zc, report


def invert_points(src_rows: np.ndarray, src_cols: np.ndarray, qy, qx, iterations: int = 20):
    """Find output positions p with W(p) == q for a dense warp W given as source-coordinate maps."""
    qy = np.asarray(qy, dtype=np.float64)
    qx = np.asarray(qx, dtype=np.float64)
    py, px = qy.copy(), qx.copy()
    for _ in range(iterations):
        wy = sample_bilinear(src_rows, py, px)
        wx = sample_bilinear(src_cols, py, px)
        py = py - (wy - qy)
        px = px - (wx - qx)
    return py, px
