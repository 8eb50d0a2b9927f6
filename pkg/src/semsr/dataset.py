"""Training corpus: patch grids over registered pairs, dihedral augmentation, pair-level splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import ImageGrid


@dataclass(frozen=True)
class TrainingPair:
    """Up-sampled LR input ``x`` and registered HR target ``z`` on one grid."""

    x: ImageGrid
    z: ImageGrid

    def __post_init__(self):
        if self.x.shape != self.z.shape:
            raise ValueError(f"x and z dims differ: {self.x.shape} vs {self.z.shape}")
        if not math.isclose(self.x.pitch_nm, self.z.pitch_nm, rel_tol=1e-6):
            raise ValueError("x and z pitch differ")


@dataclass(frozen=True)
class PatchRef:
    pair: int
    row: int
    col: int


@dataclass
class PatchSet:
    """Patch index over source pairs; pixels are sliced lazily on access."""

    sources: dict[int, TrainingPair]
    refs: list[PatchRef]
    patch: int = 128
    split: str = "train"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.refs)) != len(self.refs):
            raise ValueError("duplicate patch provenance")

    def __len__(self) -> int:
        return len(self.refs)

    def __getitem__(self, i: int) -> TrainingPair:
        ref = self.refs[i]
        src = self.sources[ref.pair]
        sl = (slice(ref.row, ref.row + self.patch), slice(ref.col, ref.col + self.patch))
        return TrainingPair(src.x.with_data(src.x.data[sl]), src.z.with_data(src.z.data[sl]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def arrays(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Stack the selected patches as (n, patch, patch) arrays of x and z."""
        xs = np.empty((len(indices), self.patch, self.patch))
        zs = np.empty_like(xs)
        for k, i in enumerate(indices):
            ref = self.refs[i]
            src = self.sources[ref.pair]
            sl = (slice(ref.row, ref.row + self.patch), slice(ref.col, ref.col + self.patch))
            xs[k] = src.x.data[sl]
            zs[k] = src.z.data[sl]
        return xs, zs

    @property
    def pair_indices(self) -> set[int]:
        return {r.pair for r in self.refs}

    def merged(self, other: "PatchSet") -> "PatchSet":
        if other.patch != self.patch:
            raise ValueError("patch sizes differ")
        return PatchSet({**self.sources, **other.sources}, self.refs + other.refs, self.patch, self.split)

    def manifest(self) -> list[dict]:
        return [{"pair": r.pair, "row": r.row, "col": r.col, "split": self.split} for r in self.refs]


def grid_positions(dim: int, patch: int, n: int) -> list[int]:
    if patch > dim:
        raise ValueError(f"image dimension {dim} smaller than patch {patch}")
    if n < 1:
        raise ValueError("grid counts must be >= 1")
    if n == 1:
        return [(dim - patch) // 2]
    stride = (dim - patch) // (n - 1)
    if stride < 1:
        raise ValueError(f"{n} patches of {patch} px do not fit distinctly in {dim} px")
    return [i * stride for i in range(n)]


def extract_patches(pair: TrainingPair, patch: int = 128, grid: tuple[int, int] = (1, 1), pair_index: int = 0) -> PatchSet:
    """rows x cols patches on an even grid; patches overlap when the grid needs it."""
    h, w = pair.x.shape
    rows = grid_positions(h, patch, grid[0])
    cols = grid_positions(w, patch, grid[1])
    refs = [PatchRef(pair_index, r, c) for r in rows for c in cols]
    return PatchSet({pair_index: pair}, refs, patch)


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Element k of the square's symmetry group acting on the last two axes: k%4 quarter turns, then a flip if k >= 4."""
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return out


def augment(patch: TrainingPair, k: int) -> TrainingPair:
    if not 0 <= k <= 7:
        raise ValueError("k must be in 0..7")
    if patch.x.height != patch.x.width:
        raise ValueError("augmentation needs square patches")
    return TrainingPair(patch.x.with_data(dihedral(patch.x.data, k)), patch.z.with_data(dihedral(patch.z.data, k)))


def split(patches: PatchSet, val_fraction: float, seed: int) -> tuple[PatchSet, PatchSet]:
    """Split by source pair so no validation patch shares an image with training."""
    if not 0 < val_fraction < 0.5:
        raise ValueError("val_fraction must be in (0, 0.5)")
    pairs = sorted(patches.pair_indices)
    if len(pairs) < 2:
        raise ValueError("need at least 2 source pairs to split")
    n_val = min(max(1, round(val_fraction * len(pairs))), len(pairs) - 1)
    order = np.random.default_rng(seed).permutation(len(pairs))
    val_pairs = {pairs[i] for i in order[:n_val]}

    def sub(keep: set[int], tag: str) -> PatchSet:
        return PatchSet(
            {k: v for k, v in patches.sources.items() if k in keep},
            [r for r in patches.refs if r.pair in keep],
            patches.patch,
            tag,
        )

    return sub(set(pairs) - val_pairs, "train"), sub(val_pairs, "val")


def write_manifest(path: str | Path, train: PatchSet, val: PatchSet, pair_dirs: dict[int, str], extra: dict | None = None) -> None:
    doc = {
        "patch": train.patch,
        "pairs": {str(k): v for k, v in sorted(pair_dirs.items())},
        "patches": train.manifest() + val.manifest(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
