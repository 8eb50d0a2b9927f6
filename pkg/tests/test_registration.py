import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import true_total_warp, warp_recovery_case
from semsr.imaging import ImageGrid, sample_bilinear
from semsr.registration import (
    AffineTransform,
    RegistrationError,
    apply_affine,
    estimate_affine,
    interpolate_blocks,
    invert_points,
    pyramid_elastic_register,
    register_pair,
    warp_displacement,
)
from semsr.specimen import Misalign, SimConfig, degrade_to_lr, make_dataset, render_hr, sample_field


@pytest.fixture(scope="module")
def ref():
    cfg = SimConfig(seed=11, particle_count=250, radius_range_nm=(5.0, 30.0), psf_sigma_nm=3.5)
    return render_hr(sample_field(cfg), cfg)


def _shifted(img, dx, dy):
    # moving(p) = ref(p - s)
    return apply_affine(img, AffineTransform(np.array([[1.0, 0, -dx], [0, 1.0, -dy]])))


def test_identity_recovered(ref):
    t = estimate_affine(ref, ref)
    np.testing.assert_allclose(t.linear, np.eye(2), atol=1e-9)
    assert np.hypot(*t.translation) < 0.1


def test_translation_recovered(ref):
    t = estimate_affine(ref, _shifted(ref, 3, -2))
    assert abs(t.angle_deg) < 0.05 and abs(t.scale - 1) < 0.003
    np.testing.assert_allclose(t.center_translation(ref.shape), [3, -2], atol=0.25)


def test_rotation_recovered(ref):
    moving = apply_affine(ref, AffineTransform.about_center(ref.shape, rot_deg=-1.5))
    t = estimate_affine(ref, moving)
    assert t.angle_deg == pytest.approx(1.5, abs=0.1)


@settings(max_examples=6, deadline=None)
@given(st.floats(-2.5, 2.5), st.floats(0.97, 1.03), st.floats(-4, 4), st.floats(-4, 4))
def test_affine_warp_recovery(rot, scale, tx, ty):
    cfg = SimConfig(seed=5, particle_count=250, radius_range_nm=(5.0, 30.0), psf_sigma_nm=3.5)
    img = render_hr(sample_field(cfg), cfg)
    true = AffineTransform.about_center(img.shape, rot, scale, tx, ty)
    t = estimate_affine(img, apply_affine(img, true))
    # the recovered transform applied to the warped image must undo the warp
    ry, rx = t.source_coords(img.shape)
    (a, b, c0), (c, d, c1) = true.matrix
    ty_, tx_ = c * rx + d * ry + c1, a * rx + b * ry + c0
    yy, xx = np.mgrid[0 : img.height, 0 : img.width]
    sl = (slice(24, -24), slice(24, -24))
    assert np.hypot(ty_ - yy, tx_ - xx)[sl].mean() < 0.25


def test_flat_and_degenerate_rejected():
    flat = ImageGrid(np.full((64, 64), 0.3), 1.0)
    with pytest.raises(RegistrationError):
        estimate_affine(flat, flat)
    with pytest.raises(RegistrationError):
        apply_affine(flat, AffineTransform(np.array([[0.1, 0, 0], [0, 0.1, 0]])))


def test_apply_affine_identity_and_inverse(ref):
    assert np.array_equal(apply_affine(ref, AffineTransform.identity()).data, ref.data)
    back = _shifted(_shifted(ref, 1, 0), -1, 0)
    sl = (slice(4, -4), slice(4, -4))
    assert np.sqrt(np.mean((back.data - ref.data)[sl] ** 2)) < 0.01


def test_quarter_turn_is_exact():
    a = np.random.default_rng(0).random((17, 17))
    out = apply_affine(ImageGrid(a, 1.0), AffineTransform.about_center(a.shape, rot_deg=90))
    np.testing.assert_allclose(out.data, np.rot90(a), atol=1e-12)
    cross = np.zeros((17, 17))
    cross[8, 3:14] = cross[3:14, 8] = 1
    np.testing.assert_allclose(apply_affine(ImageGrid(cross, 1.0), AffineTransform.about_center(cross.shape, rot_deg=90)).data,
                               cross, atol=1e-12)


def test_elastic_zero_for_identical(ref):
    d = pyramid_elastic_register(ref, ref)
    assert np.abs(d.dy).max() < 1e-6 and np.abs(d.dx).max() < 1e-6


def test_elastic_global_shift_matches_affine(ref):
    moving = _shifted(ref, 2, 1)
    d = pyramid_elastic_register(ref, moving)
    sl = (slice(16, -16), slice(16, -16))
    assert abs(d.dx[sl].mean() - 2) < 0.1 and abs(d.dy[sl].mean() - 1) < 0.1
    assert d.dx[sl].std() < 0.15 and d.dy[sl].std() < 0.15
    t = estimate_affine(ref, moving)
    np.testing.assert_allclose(t.center_translation(ref.shape), [d.dx[sl].mean(), d.dy[sl].mean()], atol=0.2)


def test_elastic_smooth_warp_recovered(ref):
    h, w = ref.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    e = lambda y, x: (2.0 * np.sin(2 * np.pi * x / 300 + 0.3) * np.cos(2 * np.pi * y / 400),
                      2.0 * np.cos(2 * np.pi * y / 350 + 1.0) * np.sin(2 * np.pi * x / 280 + 0.5))
    ey, ex = e(yy, xx)
    assert np.hypot(ey, ex).max() <= 3.0
    moving = ref.with_data(sample_bilinear(ref.data, yy + ey, xx + ex))  # moving(q) = ref(q + e(q))
    # oracle: moving(p + d) = ref(p)  <=>  d = -e(p + d), solved by fixed-point iteration
    dy, dx = np.zeros_like(yy), np.zeros_like(xx)
    for _ in range(50):
        fy, fx = e(yy + dy, xx + dx)
        dy, dx = -fy, -fx
    d = pyramid_elastic_register(ref, moving)
    sl = (slice(16, -16), slice(16, -16))
    assert np.hypot(d.dy - dy, d.dx - dx)[sl].mean() < 0.5


def test_displacement_is_bilinear_between_block_centres():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(4, 4))
    cy = np.array([7.5, 23.5, 39.5, 55.5])
    cx = np.array([5.0, 20.0, 35.0, 50.0])
    f = interpolate_blocks(vals, cy, cx, (64, 56))
    for y in range(8, 55):
        for x in range(5, 50):
            i = np.searchsorted(cy, y, side="right") - 1
            j = np.searchsorted(cx, x, side="right") - 1
            j = min(j, 2)
            ty, tx = (y - cy[i]) / (cy[i + 1] - cy[i]), (x - cx[j]) / (cx[j + 1] - cx[j])
            v = ((1 - ty) * (1 - tx) * vals[i, j] + (1 - ty) * tx * vals[i, j + 1]
                 + ty * (1 - tx) * vals[i + 1, j] + ty * tx * vals[i + 1, j + 1])
            assert f[y, x] == pytest.approx(v, abs=1e-12)


def test_elastic_field_is_capped_and_validates():
    img = ImageGrid(np.random.default_rng(2).random((64, 64)), 1.0)
    d = pyramid_elastic_register(img, ImageGrid(np.roll(img.data, 12, axis=1), 1.0), levels=2, min_block=16)
    assert d.magnitude.max() <= 8.0 + 1e-9
    with pytest.raises(ValueError):
        pyramid_elastic_register(img, img, levels=0)
    with pytest.raises(ValueError):
        pyramid_elastic_register(img, img, min_block=8)


def test_monotone_refinement_noise_free():
    cfg = SimConfig(seed=3, particle_count=250, radius_range_nm=(4.0, 25.0), psf_sigma_nm=3.5,
                    misalign=Misalign(rot_deg=0.4, tx_px=1.2, ty_px=-0.7, elastic_amp_px=1.5))
    hr = render_hr(sample_field(cfg), cfg)
    lr = degrade_to_lr(hr, cfg)
    after = []
    for levels in range(1, 5):
        x, z, rep = register_pair(lr, hr, levels=levels)
        after.append(rep.rmse_after)
    assert all(b <= a + 1e-4 for a, b in zip(after, after[1:])), after


def test_zero_misalignment_pair():
    cfg = SimConfig(seed=8, particle_count=250, radius_range_nm=(4.0, 25.0), noise_std=0.02, lr_extra_blur_nm=6.0)
    hr = render_hr(sample_field(cfg), cfg)
    x, z, rep = register_pair(degrade_to_lr(hr, cfg), hr)
    np.testing.assert_allclose(rep.affine.linear, np.eye(2), atol=0.01)
    assert np.hypot(*rep.affine.center_translation(x.shape)) < 0.25
    assert rep.accepted and rep.rmse_after == pytest.approx(rep.rmse_before, rel=0.1)
    assert x.shape == z.shape and x.pitch_nm == z.pitch_nm == pytest.approx(7.1)


def test_misaligned_pair_halves_rmse():
    m = Misalign(rot_deg=1.0, tx_px=4.0, ty_px=-3.0, elastic_amp_px=2.0)
    err, before, after = warp_recovery_case(21, m)
    assert after < 0.5 * before
    assert err < 0.5


def test_true_warp_oracle_without_misalignment():
    ty, tx = true_total_warp(SimConfig(), (8, 8))
    yy, xx = np.mgrid[0:16, 0:16]
    # bilinear edge clamping aside, the identity warp maps every pixel to itself
    np.testing.assert_allclose(ty[1:-1, 1:-1], yy[1:-1, 1:-1], atol=1e-12)
    np.testing.assert_allclose(tx[1:-1, 1:-1], xx[1:-1, 1:-1], atol=1e-12)


def test_batch_of_forty_pairs_all_accepted():
    cfg = SimConfig(seed=100, particle_count=250, radius_range_nm=(4.0, 25.0), noise_std=0.02, lr_extra_blur_nm=6.0,
                    misalign=Misalign(rot_deg=0.5, scale=1.005, tx_px=2.0, ty_px=-1.5, elastic_amp_px=1.0))
    p95 = []
    for lr, hr, _ in make_dataset(cfg, 40):
        _, _, rep = register_pair(lr, hr)
        assert rep.accepted
        p95.append(rep.residual_p95)
    assert max(p95) < 1.0


def test_invert_points_round_trip():
    h, w = 40, 50
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rows, cols = yy + 0.8 * np.sin(xx / 9), xx + 0.5 + 0.6 * np.cos(yy / 7)
    py, px = np.array([10.3, 20.0, 33.7]), np.array([12.1, 25.5, 40.2])
    qy, qx = sample_bilinear(rows, py, px), sample_bilinear(cols, py, px)
    ry, rx = invert_points(rows, cols, qy, qx)
    np.testing.assert_allclose(ry, py, atol=1e-6)
    np.testing.assert_allclose(rx, px, atol=1e-6)


def test_warp_displacement_zero_is_identity():
    a = np.random.default_rng(0).random((10, 12))
    assert np.array_equal(warp_displacement(a, np.zeros_like(a), np.zeros_like(a)), a)
