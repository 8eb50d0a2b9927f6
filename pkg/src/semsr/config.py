"""Run configuration: a strict JSON schema covering every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .gan import TrainConfig
from .specimen import Misalign, SimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Strict):
    # relative paths are resolved against the workspace (the --out directory when given)
    workspace: str = "run"
    sim: str = "sim"
    registered: str = "registered"
    dataset: str = "dataset"
    checkpoints: str = "train"
    infer: str = "infer"
    reports: str = "eval"


class MisalignConfig(_Strict):
    rot_deg: float = 0.5
    scale: float = 1.005
    tx_px: float = 2.0
    ty_px: float = -1.5
    elastic_amp_px: float = 1.0


class SimSection(_Strict):
    pairs: int = Field(30, ge=1)
    particle_count: int = Field(250, ge=0)
    radius_range_nm: tuple[float, float] = (4.0, 25.0)
    hr_pitch_nm: float = Field(7.1, gt=0)
    hr_height: int = Field(256, ge=16)
    hr_width: int = Field(256, ge=16)
    psf_sigma_nm: float = Field(3.5, ge=0)
    lr_extra_blur_nm: float = Field(6.0, ge=0)
    noise_std: float = Field(0.02, ge=0)
    no_overlap: bool = True
    misalign: MisalignConfig = MisalignConfig()

    def sim_config(self, seed: int) -> SimConfig:
        d = self.model_dump()
        d.pop("pairs")
        d["misalign"] = Misalign(**d["misalign"])
        return SimConfig(seed=seed, **d)


class RegistrationSection(_Strict):
    levels: int = Field(4, ge=1)
    min_block: int = Field(32, ge=8)


class DatasetSection(_Strict):
    patch: int = Field(64, ge=16)
    grid: tuple[int, int] = (4, 4)
    val_fraction: float = Field(0.2, gt=0, lt=0.5)


class TrainSection(_Strict):
    iterations: int = Field(5000, ge=0)
    batch: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    lr_d: float = Field(1e-4, gt=0)
    alpha: Union[float, Literal["auto"]] = "auto"
    beta: Union[float, Literal["auto"]] = "auto"
    warmup_iterations: int = Field(500, ge=0)
    probe_batches: int = Field(8, ge=1)
    d_every: int = Field(4, ge=1)
    levels: int = Field(4, ge=2)
    base_channels: int = Field(32, ge=1)
    d_base_channels: int = Field(32, ge=1)
    slope: float = Field(0.2, gt=0, lt=1)
    checkpoint_every: int = Field(1000, ge=0)
    log_every: int = Field(50, ge=0)

    @field_validator("alpha", "beta")
    @classmethod
    def _nonneg(cls, v):
        if v != "auto" and v < 0:
            raise ValueError("loss weights must be >= 0 or 'auto'")
        return v

    def train_config(self, seed: int) -> TrainConfig:
        d = self.model_dump()
        d["alpha"] = None if d["alpha"] == "auto" else d["alpha"]
        d["beta"] = None if d["beta"] == "auto" else d["beta"]
        return TrainConfig(seed=seed, **d)


class EvalSection(_Strict):
    n_gaps: int = Field(300, ge=1)
    n_bins: int = Field(64, ge=2)
    max_gap_nm: float = Field(50.0, gt=0)
    tile: int | None = None
    overlap: int = Field(16, ge=0)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    paths: PathsConfig = PathsConfig()
    sim: SimSection = SimSection()
    registration: RegistrationSection = RegistrationSection()
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text())

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with top-level fields or nested dicts merged in, re-validated."""
        data = self.model_dump(mode="json")
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **val}
            else:
                data[key] = val
        return RunConfig.model_validate(data)

    def resolve(self, out: str | Path | None = None, base: str | Path | None = None) -> dict[str, Path]:
        """Absolute stage directories."""
        ws = Path(out) if out is not None else Path(self.paths.workspace)
        if not ws.is_absolute():
            ws = (Path(base) if base else Path.cwd()) / ws
        ws = ws.resolve()
        out_paths = {"workspace": ws}
        for key, val in self.paths.model_dump().items():
            if key == "workspace":
                continue
            p = Path(val)
            out_paths[key] = p if p.is_absolute() else ws / p
        return out_paths
