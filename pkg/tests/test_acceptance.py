"""End-to-end acceptance checks, one test per criterion; each prints a PASS/FAIL line.

Criterion 5 trains the full desk-scale model (about 25 minutes on one CPU); criteria
6 and 10 reuse that run through a module fixture.
"""

import time

import numpy as np
import pytest

from oracles import brute_force_gap, random_misalign, two_peak_profile, warp_recovery_case
from semsr import gan
from semsr import pipeline as pl
from semsr.config import RunConfig
from semsr.dataset import TrainingPair, extract_patches
from semsr.evaluation import GapError, detect_gap
from semsr.gradcheck import run_suite
from semsr.imaging import crop, lanczos_upsample
from semsr.specimen import make_dataset


def _t(a):
    return np.asarray(a, dtype=np.float64)[None, None]


# -- 1: loss formulas ----------------------------------------------------------------


def test_criterion_1_loss_formulas(verdict):
    t0 = time.perf_counter()
    gx = _t([[0, 1], [1, 0]])
    cases = [
        (gan.l1_loss(gx, gx).item(), 0.0),
        (gan.l1_loss(gx, gx + 0.1).item(), 0.1),
        (gan.l1_loss(gx, _t([[1, 1], [0, 0]])).item(), 0.5),
        (gan.tv_loss(np.full((1, 1, 3, 3), 0.4)).item(), 0.0),
        (gan.tv_loss(_t([[0, 1], [0, 1]])).item(), 2.0),
        (gan.tv_loss(_t([[0, 1], [1, 0]])).item(), 4.0),
    ]
    z = np.full((1, 1, 4, 4), 0.3)
    cases.append((gan.generator_loss(z, z, np.array([[1.0]]), gan.LossWeights(0.5, 2.0)).total.item(), 0.0))
    # L1 = 0.1, TV = 2, D = 0.5, alpha = 0.01, beta = 1
    gl = gan.generator_loss(_t([[0.1, 1.1], [0.1, 1.1]]), _t([[0, 1], [0, 1]]), np.array([[0.5]]), gan.LossWeights(0.01, 1.0))
    cases.append((gl.total.item(), 0.37))
    for dg, dz, want in ((0.0, 1.0, 0.0), (1.0, 0.0, 2.0), (0.5, 0.5, 0.5)):
        cases.append((gan.discriminator_loss(np.array([[dg]]), np.array([[dz]])).item(), want))
    worst = max(abs(got - want) for got, want in cases)
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and dt < 1.0, f"{len(cases)} examples, max error {worst:.1e}, {dt:.3f} s")


# -- 2: gradient suite -----------------------------------------------------------------


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(trials=20)
    dt = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed or r.trials < 20]
    worst = max(r.max_rel_err for r in results)
    skipped = sum(r.skipped for r in results) / sum(r.checked + r.skipped for r in results)
    verdict(2, not failed and dt < 60,
            f"{len(results)} checks x 20 trials, max rel err {worst:.2e}, kink-skipped {skipped:.1%}, "
            f"failed {failed}, {dt:.1f} s")


# -- 3: registration recovery ----------------------------------------------------------


def test_criterion_3_registration_recovery(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    rows = np.array([warp_recovery_case(1000 + k, random_misalign(rng)) for k in range(50)])
    dt = time.perf_counter() - t0
    epe, before, after = rows.T
    good = (epe < 0.5) & (after < 0.5 * before)
    ok = epe.mean() < 0.5 and good.mean() >= 0.95 and dt < 300
    verdict(3, ok, f"mean EPE {epe.mean():.3f} px (max {epe.max():.3f}), cases meeting both bars "
                   f"{good.mean():.0%}, {dt:.0f} s")


# -- 4: gap oracle ---------------------------------------------------------------------


def test_criterion_4_gap_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches, worst, n_resolvable = 0, 0.0, 0
    for _ in range(1000):
        p = two_peak_profile(rng)
        spacing = float(rng.uniform(0.5, 10))
        status, ref = brute_force_gap(p, spacing)
        try:
            m = detect_gap(p, spacing)
        except GapError:
            mismatches += status != "error"
            continue
        if status == "error" or m.resolvable != ref[0]:
            mismatches += 1
        elif m.resolvable:
            n_resolvable += 1
            worst = max(worst, abs(m.width_nm - ref[1]))
    dt = time.perf_counter() - t0
    verdict(4, mismatches == 0 and worst < 1e-9 and dt < 10,
            f"1000 profiles, {mismatches} decision mismatches, {n_resolvable} widths, max diff {worst:.1e} nm, {dt:.2f} s")


# -- 5, 6, 10: the desk-scale training run ----------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = RunConfig()
    t0 = time.perf_counter()
    pairs = pl.register(cfg, pl.simulate(cfg))
    train_set, val_set = pl.patch_sets(cfg, pairs)
    state = pl.fit(cfg, train_set, val_set, out_dir=tmp_path_factory.mktemp("desk"))
    held_out = [p for p in pairs if p.index in val_set.pair_indices]
    outputs = [pl.enhance(state.generator, p.x) for p in held_out]
    gaps = pl.evaluate_gaps(cfg, held_out, outputs)
    spectrum = pl.evaluate_spectrum(cfg, held_out, outputs)
    return {"cfg": cfg, "state": state, "gaps": gaps, "spectrum": spectrum, "held_out": held_out,
            "seconds": time.perf_counter() - t0}


def test_criterion_5_resolution_gain(verdict, desk_run):
    g = desk_run["gaps"]
    fi, fo = g.input.unresolved_fraction, g.output.unresolved_fraction
    di, do = g.input.mean_abs_diff_vs_truth_nm, g.output.mean_abs_diff_vs_truth_nm
    dt = desk_run["seconds"]
    ok = len(g.lines) == 300 and fo <= 0.5 * fi and do < di and dt < 45 * 60
    verdict(5, ok, f"{len(g.lines)} gaps on {len(desk_run['held_out'])} held-out pairs: unresolved "
                   f"{fi:.1%} -> {fo:.1%}, |width - truth| {di:.2f} -> {do:.2f} nm, {dt / 60:.1f} min")


def test_criterion_6_spectral_recovery(verdict, desk_run):
    s = desk_run["spectrum"]
    d_in, d_out = s.input_deficit, s.output_deficit
    ok = s.score > 0.3 and d_in > 0 and d_in > 3 * abs(d_out)
    verdict(6, ok, f"recovery score {s.score:.3f}, high-band deficit input {d_in:.3f} vs output {d_out:.3f}")


def _off_border_mask(n: int, tile: int, overlap: int, align: int, margin: int) -> np.ndarray:
    starts = gan._tile_starts(n, tile, overlap, align)
    ok = np.ones(n, bool)
    for s in starts:
        for e in (s, s + tile):
            ok[max(0, e - margin) : e + margin] = False
    return ok


def test_criterion_10_inference_contract(verdict, desk_run):
    G = desk_run["state"].generator
    sim = desk_run["cfg"].sim.sim_config(999).replace(hr_height=512, hr_width=512, particle_count=1000)
    lr = make_dataset(sim, 1)[0][0]
    t0 = time.perf_counter()
    a = gan.infer(G, lr)
    b = gan.infer(G, lr)
    odd = crop(lr, 5, 9, 123, 117)
    dims_ok = a.shape == (512, 512) and gan.infer(G, odd).shape == (246, 234) and a.pitch_nm == lr.pitch_nm / 2
    repeat_ok = np.array_equal(a.data, b.data)
    tiled = gan.infer(G, lr, tile=128, overlap=16)
    dt = time.perf_counter() - t0
    keep = _off_border_mask(512, 128, 16, G.min_multiple, 16)
    diff = np.abs(tiled.data - a.data)
    off = diff[np.ix_(keep, keep)].max()
    ok = dims_ok and repeat_ok and off < 1e-3 and dt < 60
    verdict(10, ok, f"dims {lr.shape} -> {a.shape}, repeat identical {repeat_ok}, tiled vs untiled max diff "
                    f"{off:.1e} off borders ({diff.max():.1e} overall), {dt:.1f} s")


# -- 7 and 9: small training runs on simulated data --------------------------------------


@pytest.fixture(scope="module")
def small_patches():
    cfg = RunConfig().with_overrides(sim={"pairs": 6})
    pairs = pl.register(cfg, pl.simulate(cfg))
    return pl.patch_sets(cfg, pairs)[0]


def _small_cfg(**kw):
    base = dict(levels=3, base_channels=8, d_base_channels=8, warmup_iterations=500, seed=5,
                checkpoint_every=100, log_every=0)
    return gan.TrainConfig(**{**base, **kw})


def test_criterion_7_loss_share_calibration(verdict, small_patches):
    t0 = time.perf_counter()
    cfg = _small_cfg(iterations=500)
    state = gan.train(cfg, small_patches)  # supervised warm-up only
    w = gan.calibrate_loss_weights(state, gan.probe_set(small_patches, cfg))
    # shares measured on probe batches not used for the calibration
    fresh = [gan.sample_batch(small_patches, cfg.batch, cfg.seed, j, stream=13) for j in range(cfg.probe_batches)]
    s = gan.measured_shares(state, fresh, w)
    dt = time.perf_counter() - t0
    ok = (abs(s["adv"] - 0.84) <= 0.10 and abs(s["l1"] - 0.14) <= 0.08 and abs(s["tv"] - 0.02) <= 0.02
          and not state.calibrated and dt < 300)
    verdict(7, ok, f"alpha {w.alpha:.3g} beta {w.beta:.3g}; shares adv {s['adv']:.1%} L1 {s['l1']:.1%} "
                   f"TV {s['tv']:.1%} on fresh probes, {dt:.0f} s")


def test_criterion_9_schedule_and_determinism(verdict, small_patches, tmp_path):
    t0 = time.perf_counter()
    cfg = _small_cfg(iterations=400, warmup_iterations=100, base_channels=4, d_base_channels=4)
    a = gan.train(cfg, small_patches, out_dir=tmp_path / "a")
    gan.train(cfg, small_patches, out_dir=tmp_path / "b")
    names = ["ckpt_000100.bin", "ckpt_000200.bin", "ckpt_000300.bin", "ckpt_000400.bin", "final.bin"]
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    gan.train(cfg, small_patches, resume=tmp_path / "a/ckpt_000200.bin", out_dir=tmp_path / "c")
    resumed = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "c" / n).read_bytes() for n in names[2:])
    reloaded = gan.TrainState.load(tmp_path / "a/final.bin", cfg).d_updates
    dt = time.perf_counter() - t0
    ok = a.d_updates == 100 and reloaded == 100 and same and resumed and a.calibrated and dt < 300
    verdict(9, ok, f"D updates {a.d_updates}, identical-seed checkpoints equal {same}, "
                   f"resume from 200 reproduces 300/400/final {resumed}, {dt:.0f} s")


# -- 8: dataset arithmetic ----------------------------------------------------------------


def test_criterion_8_dataset_arithmetic(verdict):
    t0 = time.perf_counter()
    sim = RunConfig().sim.sim_config(100).replace(hr_height=780, hr_width=924)
    total, shapes, distinct = 0, set(), True
    for i, (lr, hr, _) in enumerate(make_dataset(sim, 40)):
        ps = extract_patches(TrainingPair(lanczos_upsample(lr, 2), hr), 128, (6, 8), i)
        total += len(ps)
        distinct &= len({(r.row, r.col) for r in ps.refs}) == len(ps)
        shapes |= {ps[k].x.shape for k in (0, len(ps) - 1)} | {ps[k].z.shape for k in (0, len(ps) - 1)}
    dt = time.perf_counter() - t0
    verdict(8, total == 1920 and shapes == {(128, 128)} and distinct and dt < 60,
            f"40 pairs of {hr.width}x{hr.height} -> {total} patches of {sorted(shapes)}, {dt:.1f} s")
