"""Pipeline stages: in-memory building blocks and the on-disk stages the CLI runs.

Every on-disk stage writes its outputs plus a ``manifest.json`` recording the
effective configuration, its hash, and SHA-256 hashes of the stage's input and
output files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig
from .dataset import PatchSet, TrainingPair, extract_patches, read_manifest, split, write_manifest
from .gan import Generator, TrainState, infer, run_generator, train
from .imaging import ImageGrid, crop_offsets, load_image, save_image
from .registration import RegistrationReport, harmonize, invert_points, register_pair, total_warp
from .specimen import Particle, ParticleField, make_dataset

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# in-memory stages


@dataclass
class RegisteredPair:
    index: int
    x: ImageGrid  # up-sampled LR, cropped to the valid region
    z: ImageGrid  # HR warped onto x's grid
    field: ParticleField | None  # particle positions on the z grid
    report: RegistrationReport


def simulate(cfg: RunConfig, pairs: int | None = None):
    """(lr, hr, field) triples; pair i uses seed cfg.seed + i."""
    return make_dataset(cfg.sim.sim_config(cfg.seed), pairs or cfg.sim.pairs)


def transform_field(fld: ParticleField, pitch_nm: float, offset: tuple[int, int], report: RegistrationReport) -> ParticleField:
    """Map particle centres from the simulated HR frame onto the registered (cropped) grid.

    ``offset`` is where the HR image used for registration starts inside the simulated frame.
    """
    pitch = pitch_nm
    off_r, off_c = offset
    rows, cols = total_warp(report.affine, report.displacement)
    cx, cy, r = fld.arrays()
    qy, qx = cy / pitch - 0.5 - off_r, cx / pitch - 0.5 - off_c
    py, px = invert_points(rows, cols, qy, qx)
    r0, c0, bh, bw = report.crop_box
    py, px = py - r0, px - c0
    # the warp rescales lengths by 1 / scale
    rad = r / report.affine.scale
    out = []
    for y, x, rr in zip(py, px, rad):
        if -0.5 <= y <= bh - 0.5 and -0.5 <= x <= bw - 0.5:
            out.append(Particle(float((x + 0.5) * pitch), float((y + 0.5) * pitch), float(rr)))
    return ParticleField(bw * pitch, bh * pitch, tuple(out))


def register(cfg: RunConfig, sim) -> list[RegisteredPair]:
    out = []
    for i, (lr, hr, fld) in enumerate(sim):
        lr_h, hr_h = harmonize(lr, hr)
        x, z, rep = register_pair(lr_h, hr_h, levels=cfg.registration.levels, min_block=cfg.registration.min_block)
        off = crop_offsets(hr.height, hr.width, hr_h.height, hr_h.width)
        f2 = transform_field(fld, hr.pitch_nm, off, rep) if fld is not None else None
        out.append(RegisteredPair(i, x, z, f2, rep))
        log.info("registered pair %d: rmse %.4f -> %.4f", i, rep.rmse_before, rep.rmse_after)
    return out


def patch_sets(cfg: RunConfig, pairs: list[RegisteredPair]) -> tuple[PatchSet, PatchSet]:
    d = cfg.dataset
    allp = None
    for p in pairs:
        ps = extract_patches(TrainingPair(p.x, p.z), d.patch, tuple(d.grid), p.index)
        allp = ps if allp is None else allp.merged(ps)
    return split(allp, d.val_fraction, cfg.seed)


def fit(cfg: RunConfig, train_set: PatchSet, val_set: PatchSet | None, out_dir=None, resume=None) -> TrainState:
    return train(cfg.train.train_config(cfg.seed), train_set, val_set, out_dir=out_dir, resume=resume)


def enhance(G: Generator, x: ImageGrid, tile: int | None = None, overlap: int = 16) -> ImageGrid:
    """Generator output for an already up-sampled image, clamped to [0, 1]."""
    return x.with_data(np.clip(run_generator(G, x.data, tile, overlap), 0.0, 1.0))


@dataclass
class GapResult:
    lines: list
    truth: ev.GapStats
    input: ev.GapStats
    output: ev.GapStats
    rows: list[dict]

    def summary(self) -> dict:
        return {"n_gaps": len(self.lines), "truth": self.truth.to_json(), "input": self.input.to_json(),
                "output": self.output.to_json()}


def evaluate_gaps(cfg: RunConfig, pairs: list[RegisteredPair], outputs: list[ImageGrid], seed: int | None = None) -> GapResult:
    seed = cfg.seed if seed is None else seed
    fields = [p.field for p in pairs]
    truths = [p.z for p in pairs]
    inputs = [p.x for p in pairs]
    lines = ev.sample_gap_lines(fields, truths, cfg.eval.n_gaps, seed, cfg.eval.max_gap_nm)
    stats = ev.gap_statistics(truths, inputs, outputs, lines)
    per = [ev.measure_lines(imgs, lines) for imgs in (truths, inputs, outputs)]
    rows = []
    for k, ln in enumerate(lines):
        row = {"line_id": k, "pair": pairs[ln.image].index, "particle_a": ln.pair[0], "particle_b": ln.pair[1]}
        for tag, ms in zip(("truth", "input", "output"), per):
            row[f"{tag}_resolvable"] = int(ms[k].resolvable)
            row[f"{tag}_width_nm"] = ms[k].width_nm
        rows.append(row)
    return GapResult(lines, *stats, rows)


@dataclass
class SpectrumResult:
    input: ev.RadialSpectrum
    output: ev.RadialSpectrum
    truth: ev.RadialSpectrum
    score: float
    input_deficit: float
    output_deficit: float

    def summary(self) -> dict:
        return {
            "spectral_recovery_score": self.score,
            "high_band_deficit_input": self.input_deficit,
            "high_band_deficit_output": self.output_deficit,
            "nyquist_cyc_per_nm": self.truth.nyquist,
            "n_bins": int(len(self.truth.bin_centers)),
        }

    def rows(self) -> list[dict]:
        return [{"bin_center_cyc_per_nm": c, "input": a, "output": b, "truth": t}
                for c, a, b, t in zip(self.truth.bin_centers, self.input.magnitude, self.output.magnitude, self.truth.magnitude)]


def evaluate_spectrum(cfg: RunConfig, pairs: list[RegisteredPair], outputs: list[ImageGrid]) -> SpectrumResult:
    n = cfg.eval.n_bins
    spec = {}
    for tag, imgs in (("input", [p.x for p in pairs]), ("output", outputs), ("truth", [p.z for p in pairs])):
        spec[tag] = ev.mean_spectrum([ev.image_radial_spectrum(im, n) for im in imgs])
    score = ev.spectral_recovery_score(spec["input"], spec["output"], spec["truth"])
    return SpectrumResult(spec["input"], spec["output"], spec["truth"], score,
                          ev.high_band_deficit(spec["input"], spec["truth"]),
                          ev.high_band_deficit(spec["output"], spec["truth"]))


# --------------------------------------------------------------------------
# on-disk stages


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tree_hashes(root: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(root)): file_hash(p) for p in sorted(paths)}


def write_manifest_json(stage_dir: Path, cfg: RunConfig, stage: str, inputs: dict[str, str], extra: dict | None = None) -> None:
    outputs = [p for p in sorted(stage_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"]
    doc = {
        "stage": stage,
        "config": json.loads(cfg.dumps()),
        "config_sha256": cfg.digest(),
        "inputs": inputs,
        "outputs": _tree_hashes(stage_dir, outputs),
    }
    if extra:
        doc.update(extra)
    (stage_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _stage_inputs(stage_dir: Path) -> dict[str, str]:
    """Hashes of every file a previous stage produced (its manifest lists them)."""
    man = stage_dir / "manifest.json"
    if not man.exists():
        raise FileNotFoundError(f"{stage_dir} has no manifest.json; run the previous stage first")
    return {f"{stage_dir.name}/{k}": v for k, v in json.loads(man.read_text())["outputs"].items()}


def _pair_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.glob("pair_*") if p.is_dir())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def stage_simulate(cfg: RunConfig, paths: dict[str, Path], pairs: int | None = None) -> Path:
    out = paths["sim"]
    out.mkdir(parents=True, exist_ok=True)
    for i, (lr, hr, fld) in enumerate(simulate(cfg, pairs)):
        d = out / f"pair_{i:03d}"
        d.mkdir(exist_ok=True)
        save_image(lr, d / "lr.png")
        save_image(hr, d / "hr.png")
        fld.save(d / "field.json")
    sim_cfg = cfg.sim.sim_config(cfg.seed)
    write_manifest_json(out, cfg, "simulate", {}, {"pairs": pairs or cfg.sim.pairs,
                                                    "metadata": {"accel_kv": sim_cfg.accel_kv, "beam_na": sim_cfg.beam_na,
                                                                 "dwell_us": sim_cfg.dwell_us}})
    return out


def load_simulated(root: Path):
    sim = []
    for d in _pair_dirs(root):
        fpath = d / "field.json"
        sim.append((load_image(d / "lr.png"), load_image(d / "hr.png"), ParticleField.load(fpath) if fpath.exists() else None))
    if not sim:
        raise FileNotFoundError(f"no pair_* directories under {root}")
    return sim


def stage_register(cfg: RunConfig, paths: dict[str, Path]) -> Path:
    src, out = paths["sim"], paths["registered"]
    inputs = _stage_inputs(src)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for rp in register(cfg, load_simulated(src)):
        d = out / f"pair_{rp.index:03d}"
        d.mkdir(exist_ok=True)
        save_image(rp.x, d / "x.png")
        save_image(rp.z, d / "z.png")
        if rp.field is not None:
            rp.field.save(d / "field.json")
        _write_json(d / "report.json", rp.report.to_json())
        reports.append(rp.report)
    write_manifest_json(out, cfg, "register", inputs, {
        "accepted": sum(r.accepted for r in reports),
        "mean_rmse_before": float(np.mean([r.rmse_before for r in reports])),
        "mean_rmse_after": float(np.mean([r.rmse_after for r in reports])),
    })
    return out


def load_registered(root: Path, indices=None) -> list[RegisteredPair]:
    out = []
    for d in _pair_dirs(root):
        idx = int(d.name.split("_")[1])
        if indices is not None and idx not in indices:
            continue
        fpath = d / "field.json"
        fld = ParticleField.load(fpath) if fpath.exists() else None
        out.append(RegisteredPair(idx, load_image(d / "x.png"), load_image(d / "z.png"), fld, None))
    return out


def stage_dataset(cfg: RunConfig, paths: dict[str, Path]) -> Path:
    src, out = paths["registered"], paths["dataset"]
    inputs = _stage_inputs(src)
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_registered(src)
    tr, va = patch_sets(cfg, pairs)
    # relative to the dataset directory so the tree does not depend on its location
    pair_dirs = {p.index: os.path.relpath(src / f"pair_{p.index:03d}", out) for p in pairs}
    write_manifest(out / "patches.json", tr, va, pair_dirs, {
        "n_train": len(tr), "n_val": len(va),
        "train_pairs": sorted(tr.pair_indices), "val_pairs": sorted(va.pair_indices),
    })
    write_manifest_json(out, cfg, "dataset", inputs, {"n_train": len(tr), "n_val": len(va)})
    return out


def load_patch_sets(paths: dict[str, Path]) -> tuple[PatchSet, PatchSet]:
    from .dataset import PatchRef

    man = read_manifest(paths["dataset"] / "patches.json")
    sources = {}
    for k, d in man["pairs"].items():
        d = paths["dataset"] / d
        sources[int(k)] = TrainingPair(load_image(d / "x.png"), load_image(d / "z.png"))
    sets = {}
    for tag in ("train", "val"):
        refs = [PatchRef(p["pair"], p["row"], p["col"]) for p in man["patches"] if p["split"] == tag]
        keep = {r.pair for r in refs}
        sets[tag] = PatchSet({k: v for k, v in sources.items() if k in keep}, refs, man["patch"], tag)
    return sets["train"], sets["val"]


def stage_train(cfg: RunConfig, paths: dict[str, Path], resume: str | Path | None = None) -> TrainState:
    out = paths["checkpoints"]
    inputs = _stage_inputs(paths["dataset"])
    tr, va = load_patch_sets(paths)
    state = fit(cfg, tr, va, out_dir=out, resume=resume)
    shares = state.loss_shares()
    report = {
        "iterations": state.iteration,
        "d_updates": state.d_updates,
        "alpha": state.weights.alpha,
        "beta": state.weights.beta,
        "calibrated": state.calibrated,
        "loss_shares": shares,
        "initial_val_l1": state.initial_val_l1,
        "final_val_l1": state.final_val_l1,
    }
    _write_json(out / "train_report.json", report)
    write_manifest_json(out, cfg, "train", inputs)
    return state


def _checkpoint(paths: dict[str, Path], checkpoint: str | Path | None) -> Path:
    ck = Path(checkpoint) if checkpoint else paths["checkpoints"] / "final.bin"
    if not ck.exists():
        raise FileNotFoundError(f"checkpoint {ck} not found")
    return ck


def stage_infer(cfg: RunConfig, paths: dict[str, Path], checkpoint=None, input_path=None, output_path=None,
                pitch_nm: float | None = None) -> list[Path]:
    """Single-image mode with ``input_path`` (a raw LR acquisition), else every held-out registered pair."""
    ck = _checkpoint(paths, checkpoint)
    state = TrainState.load(ck, cfg.train.train_config(cfg.seed))
    if input_path is not None:
        out_img = infer(state, load_image(input_path, pitch_nm), cfg.eval.tile, cfg.eval.overlap)
        dest = Path(output_path) if output_path else paths["infer"] / (Path(input_path).stem + "_sr.png")
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_image(out_img, dest)
        return [dest]
    out = paths["infer"]
    out.mkdir(parents=True, exist_ok=True)
    man = read_manifest(paths["dataset"] / "patches.json")
    inputs = {"checkpoint": file_hash(ck), **_stage_inputs(paths["dataset"])}
    written = []
    for p in load_registered(paths["registered"], set(man["val_pairs"])):
        dest = out / f"pair_{p.index:03d}_output.png"
        save_image(enhance(state.generator, p.x, cfg.eval.tile, cfg.eval.overlap), dest)
        written.append(dest)
    write_manifest_json(out, cfg, "infer", inputs)
    return written


def _eval_inputs(cfg: RunConfig, paths: dict[str, Path]):
    man = read_manifest(paths["dataset"] / "patches.json")
    pairs = load_registered(paths["registered"], set(man["val_pairs"]))
    outputs = [load_image(paths["infer"] / f"pair_{p.index:03d}_output.png") for p in pairs]
    inputs = {**_stage_inputs(paths["infer"])}
    return pairs, outputs, inputs


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        wr.writerows(rows)


def stage_eval_gaps(cfg: RunConfig, paths: dict[str, Path]) -> GapResult:
    pairs, outputs, inputs = _eval_inputs(cfg, paths)
    res = evaluate_gaps(cfg, pairs, outputs)
    out = paths["reports"]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "gaps.csv", res.rows)
    _write_json(out / "gaps_summary.json", _jsonable(res.summary()))
    write_manifest_json(out, cfg, "eval", inputs)
    return res


def stage_eval_spectrum(cfg: RunConfig, paths: dict[str, Path]) -> SpectrumResult:
    pairs, outputs, inputs = _eval_inputs(cfg, paths)
    res = evaluate_spectrum(cfg, pairs, outputs)
    out = paths["reports"]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "spectrum.csv", res.rows())
    _write_json(out / "spectrum_summary.json", _jsonable(res.summary()))
    write_manifest_json(out, cfg, "eval", inputs)
    return res


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def stage_report(cfg: RunConfig, paths: dict[str, Path]) -> dict:
    rep = paths["reports"]
    gaps = json.loads((rep / "gaps_summary.json").read_text())
    spec = json.loads((rep / "spectrum_summary.json").read_text())
    trep = json.loads((paths["checkpoints"] / "train_report.json").read_text())
    summary = {
        "config": json.loads(cfg.dumps()),
        "config_sha256": cfg.digest(),
        "gaps": gaps,
        "unresolved_fraction": {k: gaps[k]["unresolved_fraction"] for k in ("input", "output", "truth")},
        "mean_abs_diff_vs_truth_nm": {k: gaps[k]["mean_abs_diff_vs_truth_nm"] for k in ("input", "output")},
        "spectral_recovery_score": spec["spectral_recovery_score"],
        "spectrum": spec,
        "loss_shares": trep["loss_shares"],
        "training": trep,
        "reference": {
            "unresolved_fraction": {"input": 0.139, "output": 0.037},
            "mean_abs_diff_vs_truth_nm": {"input": 3.8, "output": 2.1},
            "loss_shares": {"adv": 0.84, "l1": 0.14, "tv": 0.02},
        },
    }
    _write_json(paths["workspace"] / "summary.json", _jsonable(summary))
    return summary
