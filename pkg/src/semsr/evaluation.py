"""Resolution metrics: inter-particle gap analysis, cross-section profiles and radially averaged spectra.

Positions along a line profile are in sample units; widths are converted to nm with
the profile's sample spacing. Particle centres map to pixel coordinates by
col = cx_nm / pitch - 0.5 (pixel-centre convention, as in the simulator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imaging import ImageGrid, sample_bilinear
from .specimen import ParticleField

RESOLVE_FRACTION = 0.6
WIDTH_FRACTION = 0.8
MAX_EDGE_GAP_NM = 50.0


class GapError(ValueError):
    """Profile does not show exactly two peaks with one valley between them."""


# --------------------------------------------------------------------------
# line profiles


@dataclass(frozen=True)
class LineProfile:
    samples: np.ndarray
    pitch_nm: float  # pixel pitch of the sampled image
    spacing_nm: float  # distance between consecutive samples
    start: tuple[float, float]  # (row, col) in pixels
    end: tuple[float, float]
    image: int = 0  # index of the image this line belongs to when several are evaluated together
    pair: tuple[int, int] = (-1, -1)  # particle indices

    def __post_init__(self):
        if len(self.samples) < 5:
            raise ValueError("a line profile needs at least 5 samples")
        if not self.spacing_nm <= self.pitch_nm + 1e-9:
            raise ValueError("sample spacing must not exceed the pixel pitch")

    @property
    def n(self) -> int:
        return len(self.samples)

    def resample(self, img: ImageGrid) -> "LineProfile":
        """The same segment sampled from another image on the same grid."""
        return line_profile(img, self.start, self.end, n=self.n, image=self.image, pair=self.pair)

    def to_json(self) -> dict:
        return {"start": list(self.start), "end": list(self.end), "n": self.n, "image": self.image,
                "pair": list(self.pair), "spacing_nm": self.spacing_nm}


def line_profile(img: ImageGrid, start, end, spacing_px: float = 0.5, n: int | None = None,
                 image: int = 0, pair=(-1, -1)) -> LineProfile:
    """Bilinear samples at uniform spacing from ``start`` to ``end`` (both (row, col) in pixels, inclusive)."""
    r0, c0 = (float(v) for v in start)
    r1, c1 = (float(v) for v in end)
    length = math.hypot(r1 - r0, c1 - c0)
    if n is None:
        n = max(5, int(math.ceil(length / spacing_px)) + 1)
    t = np.linspace(0.0, 1.0, n)
    vals = sample_bilinear(img.data, r0 + t * (r1 - r0), c0 + t * (c1 - c0))
    spacing = length / (n - 1) * img.pitch_nm
    return LineProfile(vals, img.pitch_nm, spacing, (r0, c0), (r1, c1), image, tuple(pair))


# --------------------------------------------------------------------------
# gap detection


@dataclass(frozen=True)
class GapMeasurement:
    resolvable: bool
    width_nm: float  # nan unless resolvable
    peak_left: float
    peak_right: float
    min_between: float
    valley_index: int = -1
    left_cross: float = math.nan  # sample positions of the 0.8 P crossings
    right_cross: float = math.nan
    status: str = "ok"  # ok | no_valley | ambiguous (only produced by measure_gap)


def _valley(p: np.ndarray) -> int:
    """Interior index maximising min(max left of k, max right of k) - p[k]; -1 if no dip."""
    left = np.maximum.accumulate(p)
    right = np.maximum.accumulate(p[::-1])[::-1]
    depth = np.minimum(left[:-2], right[2:]) - p[1:-1]
    k = int(np.argmax(depth))
    return k + 1 if depth[k] > 0 else -1


def _crossing_left(p: np.ndarray, k: int, thr: float) -> float:
    i = k - 1
    while i >= 0 and p[i] < thr:
        i -= 1
    if i < 0:
        return float(np.argmax(p[:k]))
    return i + (p[i] - thr) / (p[i] - p[i + 1])


def _crossing_right(p: np.ndarray, k: int, thr: float) -> float:
    i = k + 1
    while i < len(p) and p[i] < thr:
        i += 1
    if i == len(p):
        return float(k + 1 + np.argmax(p[k + 1 :]))
    return i - (p[i] - thr) / (p[i] - p[i - 1])


def _runs_above(p: np.ndarray, thr: float) -> int:
    above = (p >= thr).astype(np.int8)
    return int(above[0] + np.count_nonzero(np.diff(above) == 1))


def detect_gap(profile: LineProfile | np.ndarray, spacing_nm: float | None = None) -> GapMeasurement:
    """Gap between two particle peaks on a line profile.

    P is the larger of the two peaks flanking the deepest valley. The gap is resolvable
    iff the valley minimum is strictly below 0.6 P; its width is the distance between the
    linearly interpolated 0.8 P crossings on either side of the valley. If one flank never
    reaches 0.8 P (a much weaker neighbour) that flank's peak position is used instead.
    """
    if isinstance(profile, LineProfile):
        p, spacing = np.asarray(profile.samples, dtype=np.float64), profile.spacing_nm
    else:
        p, spacing = np.asarray(profile, dtype=np.float64), spacing_nm
    if spacing is None or not spacing > 0:
        raise ValueError("sample spacing must be positive")
    if p.size < 5:
        raise ValueError("profile too short")
    k = _valley(p)
    if k < 0:
        raise GapError("no valley between peaks")
    pl, pr = float(p[:k].max()), float(p[k + 1 :].max())
    peak = max(pl, pr)
    if _runs_above(p, WIDTH_FRACTION * peak) > 2:
        raise GapError("more than two peaks on the profile")
    vmin = float(p[k])
    if not vmin < RESOLVE_FRACTION * peak:
        return GapMeasurement(False, math.nan, pl, pr, vmin, k)
    thr = WIDTH_FRACTION * peak
    a, b = _crossing_left(p, k, thr), _crossing_right(p, k, thr)
    return GapMeasurement(True, float((b - a) * spacing), pl, pr, vmin, k, float(a), float(b))


def measure_gap(profile: LineProfile) -> GapMeasurement:
    """detect_gap, with malformed profiles reported as unresolved instead of raising."""
    try:
        return detect_gap(profile)
    except GapError as exc:
        p = np.asarray(profile.samples)
        status = "no_valley" if "valley" in str(exc) else "ambiguous"
        return GapMeasurement(False, math.nan, float(p.max()), float(p.max()), float(p.min()), status=status)


# --------------------------------------------------------------------------
# line selection


def _point_segment_dist(px, py, ax, ay, bx, by) -> np.ndarray:
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def candidate_pairs(fld: ParticleField, img: ImageGrid, max_gap_nm: float = MAX_EDGE_GAP_NM,
                    require_resolved: bool = True, spacing_px: float = 0.5) -> list[tuple[int, int]]:
    """Nearest-neighbour particle pairs eligible for gap measurement, in ascending index order.

    A pair qualifies when its edge gap is in (0, max_gap_nm), its extended line lies inside the
    image, no third particle touches that line, and (optionally) the gap is resolvable in ``img``.
    """
    cx, cy, r = fld.arrays()
    n = len(r)
    if n < 2:
        return []
    d = np.hypot(cx[:, None] - cx[None, :], cy[:, None] - cy[None, :])
    np.fill_diagonal(d, np.inf)
    nearest = np.argmin(d, axis=1)
    pairs = sorted({(min(i, int(j)), max(i, int(j))) for i, j in enumerate(nearest)})
    pitch = img.pitch_nm
    hx, hy = img.width * pitch, img.height * pitch
    out = []
    for i, j in pairs:
        gap = d[i, j] - r[i] - r[j]
        if not 0 < gap < max_gap_nm:
            continue
        ux, uy = (cx[j] - cx[i]) / d[i, j], (cy[j] - cy[i]) / d[i, j]
        ax, ay = cx[i] - r[i] * ux, cy[i] - r[i] * uy
        bx, by = cx[j] + r[j] * ux, cy[j] + r[j] * uy
        margin = pitch
        if min(ax, bx) < margin or min(ay, by) < margin or max(ax, bx) > hx - margin or max(ay, by) > hy - margin:
            continue
        others = np.ones(n, dtype=bool)
        others[[i, j]] = False
        dist = _point_segment_dist(cx[others], cy[others], ax, ay, bx, by)
        if np.any(dist < r[others] + pitch):
            continue
        if require_resolved:
            prof = _pair_line(fld, img, i, j, spacing_px)
            try:
                if not detect_gap(prof).resolvable:
                    continue
            except GapError:
                continue
        out.append((i, j))
    return out


def _pair_line(fld: ParticleField, img: ImageGrid, i: int, j: int, spacing_px: float = 0.5, image: int = 0) -> LineProfile:
    cx, cy, r = fld.arrays()
    dist = math.hypot(cx[j] - cx[i], cy[j] - cy[i])
    ux, uy = (cx[j] - cx[i]) / dist, (cy[j] - cy[i]) / dist
    pitch = img.pitch_nm
    start = ((cy[i] - r[i] * uy) / pitch - 0.5, (cx[i] - r[i] * ux) / pitch - 0.5)
    end = ((cy[j] + r[j] * uy) / pitch - 0.5, (cx[j] + r[j] * ux) / pitch - 0.5)
    return line_profile(img, start, end, spacing_px, image=image, pair=(i, j))


def sample_gap_lines(fld: ParticleField | Sequence[ParticleField], img: ImageGrid | Sequence[ImageGrid], n: int,
                     seed: int, max_gap_nm: float = MAX_EDGE_GAP_NM, spacing_px: float = 0.5) -> list[LineProfile]:
    """n adjacent-pair line profiles, chosen reproducibly under ``seed``.

    Each line runs through both particle centres and extends one radius beyond each.
    ``img`` is the ground-truth (HR) image the pairs are picked on; lists of fields and
    images pool candidates across several images (``LineProfile.image`` tells them apart).
    """
    fields = [fld] if isinstance(fld, ParticleField) else list(fld)
    imgs = [img] if isinstance(img, ImageGrid) else list(img)
    if len(fields) != len(imgs):
        raise ValueError("one particle field per image is required")
    if n < 1:
        raise ValueError("n must be >= 1")
    if all(len(f.particles) < 2 for f in fields):
        raise ValueError("need at least two particles")
    pool = [(k, i, j) for k, (f, im) in enumerate(zip(fields, imgs)) for i, j in candidate_pairs(f, im, max_gap_nm, spacing_px=spacing_px)]
    if len(pool) < n:
        raise ValueError(f"only {len(pool)} qualifying particle pairs, {n} requested")
    order = np.random.default_rng(seed).permutation(len(pool))[:n]
    return [_pair_line(fields[k], imgs[k], i, j, spacing_px, image=k) for k, i, j in (pool[q] for q in sorted(order))]


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class GapStats:
    n_total: int
    n_unresolved: int
    unresolved_fraction: float
    mean_width_nm: float
    mean_abs_diff_vs_truth_nm: float
    gaussian_fit: tuple[float, float]  # (mean, sigma) of resolved widths
    n_compared: int = 0  # gaps resolved in both this image and the truth

    def to_json(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_unresolved": self.n_unresolved,
            "unresolved_fraction": self.unresolved_fraction,
            "mean_width_nm": self.mean_width_nm,
            "mean_abs_diff_vs_truth_nm": self.mean_abs_diff_vs_truth_nm,
            "gaussian_fit": {"mean": self.gaussian_fit[0], "sigma": self.gaussian_fit[1]},
            "n_compared": self.n_compared,
        }


def _as_list(imgs) -> list[ImageGrid]:
    return [imgs] if isinstance(imgs, ImageGrid) else list(imgs)


def measure_lines(imgs: ImageGrid | Sequence[ImageGrid], lines: Sequence[LineProfile]) -> list[GapMeasurement]:
    imgs = _as_list(imgs)
    return [measure_gap(ln.resample(imgs[ln.image])) for ln in lines]


def _stats(meas: list[GapMeasurement], truth: list[GapMeasurement]) -> GapStats:
    n = len(meas)
    widths = np.array([m.width_nm for m in meas if m.resolvable])
    n_un = n - len(widths)
    both = [(m.width_nm, t.width_nm) for m, t in zip(meas, truth) if m.resolvable and t.resolvable]
    diff = float(np.mean([abs(a - b) for a, b in both])) if both else math.nan
    mean = float(widths.mean()) if len(widths) else math.nan
    sigma = float(widths.std(ddof=1)) if len(widths) > 1 else math.nan
    return GapStats(n, n_un, n_un / n if n else math.nan, mean, diff, (mean, sigma), len(both))


def gap_statistics(truth_img, input_img, output_img, lines: Sequence[LineProfile]):
    """GapStats for (truth, input, output) over one shared line set.

    Each argument may be a single image or a list indexed by ``LineProfile.image``;
    corresponding images must share shape and pitch.
    """
    groups = [_as_list(truth_img), _as_list(input_img), _as_list(output_img)]
    for imgs in groups[1:]:
        if len(imgs) != len(groups[0]):
            raise ValueError("image lists differ in length")
        for a, b in zip(groups[0], imgs):
            if a.shape != b.shape or not math.isclose(a.pitch_nm, b.pitch_nm, rel_tol=1e-9):
                raise ValueError(f"misaligned grids: {a.shape}@{a.pitch_nm} vs {b.shape}@{b.pitch_nm}")
    truth = measure_lines(groups[0], lines)
    return tuple(_stats(measure_lines(g, lines) if k else truth, truth) for k, g in enumerate(groups))


# --------------------------------------------------------------------------
# spectra


def hann2d(h: int, w: int) -> np.ndarray:
    """Periodic Hann window."""
    wy = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(h) / h)
    wx = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(w) / w)
    return np.outer(wy, wx)


def windowed(img: ImageGrid | np.ndarray) -> np.ndarray:
    a = img.data if isinstance(img, ImageGrid) else np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 32:
        raise ValueError("spectrum needs a 2-D image of at least 32x32")
    return (a - a.mean()) * hann2d(*a.shape)


def windowed_fft(img: ImageGrid | np.ndarray) -> np.ndarray:
    """Centred (DC in the middle) DFT of the mean-subtracted, Hann-windowed image."""
    return np.fft.fftshift(np.fft.fft2(windowed(img)))


def spectrum2d(img: ImageGrid | np.ndarray) -> np.ndarray:
    return np.log10(1.0 + np.abs(windowed_fft(img)))


@dataclass
class RadialSpectrum:
    bin_centers: np.ndarray  # cycles / nm
    magnitude: np.ndarray  # nan where the annulus is empty
    counts: np.ndarray = field(default=None)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def nyquist(self) -> float:
        return float(self.bin_centers[-1])

    def to_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.bin_centers.tolist(), self.magnitude.tolist()))


def radial_average(spec: np.ndarray, pitch_nm: float, n_bins: int) -> RadialSpectrum:
    """Mean of a centred 2-D spectrum over equal-width annuli.

    Bin centres are evenly spaced from 0 to Nyquist = 1 / (2 pitch) inclusive; bin k holds
    frequencies within half a bin width of its centre. Corner frequencies beyond the last
    bin are ignored.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    h, w = spec.shape
    fy = np.fft.fftshift(np.fft.fftfreq(h, d=pitch_nm))
    fx = np.fft.fftshift(np.fft.fftfreq(w, d=pitch_nm))
    rad = np.hypot(fy[:, None], fx[None, :])
    nyq = 1.0 / (2.0 * pitch_nm)
    centers = np.linspace(0.0, nyq, n_bins)
    width = nyq / (n_bins - 1)
    idx = np.rint(rad / width).astype(np.int64).ravel()
    keep = idx < n_bins
    counts = np.bincount(idx[keep], minlength=n_bins)
    sums = np.bincount(idx[keep], weights=spec.ravel()[keep], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mag = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return RadialSpectrum(centers, mag, counts)


def image_radial_spectrum(img: ImageGrid, n_bins: int) -> RadialSpectrum:
    return radial_average(spectrum2d(img), img.pitch_nm, n_bins)


def mean_spectrum(spectra: Sequence[RadialSpectrum]) -> RadialSpectrum:
    """Average of spectra with identical binning (used to pool several held-out images)."""
    first = spectra[0]
    for s in spectra[1:]:
        _check_binning(first, s)
    mags = np.stack([s.magnitude for s in spectra])
    counts = np.sum([s.counts for s in spectra], axis=0)
    return RadialSpectrum(first.bin_centers.copy(), mags.mean(axis=0), counts)


def _check_binning(a: RadialSpectrum, b: RadialSpectrum) -> None:
    if a.bin_centers.shape != b.bin_centers.shape or not np.allclose(a.bin_centers, b.bin_centers, rtol=1e-12, atol=0):
        raise ValueError("radial spectra have different binning")


def high_band(rs: RadialSpectrum) -> slice:
    n = len(rs.bin_centers)
    return slice(n // 2, n)


def high_band_deficit(rs: RadialSpectrum, truth: RadialSpectrum) -> float:
    """Mean of (truth - rs) over the upper half of the bins; positive when rs lacks high frequencies."""
    _check_binning(rs, truth)
    hb = high_band(rs)
    d = truth.magnitude[hb] - rs.magnitude[hb]
    return float(np.nanmean(d))


def spectral_recovery_score(input_rs: RadialSpectrum, output_rs: RadialSpectrum, truth_rs: RadialSpectrum) -> float:
    """1 - |output - truth|_1 / |input - truth|_1 over the upper half of the bins, clamped to [0, 1]."""
    _check_binning(input_rs, truth_rs)
    _check_binning(output_rs, truth_rs)
    hb = high_band(truth_rs)
    i, o, t = input_rs.magnitude[hb], output_rs.magnitude[hb], truth_rs.magnitude[hb]
    ok = np.isfinite(i) & np.isfinite(o) & np.isfinite(t)
    base = np.abs(i[ok] - t[ok]).sum()
    err = np.abs(o[ok] - t[ok]).sum()
    if base == 0:
        return 1.0 if err == 0 else 0.0
    return float(np.clip(1.0 - err / base, 0.0, 1.0))
