import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsr.gradcheck import case_names, check_function, run_suite
from semsr.nn import Parameter, adam_step
from semsr.nn import tensor as T
from semsr.nn.checkpoint import load_checkpoint, save_checkpoint
from semsr.nn.tensor import NonFiniteError, Tensor


def naive_conv(x, w, b, stride):
    # direct six-loop cross-correlation with zero padding
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    ho, wo = (h + stride - 1) // stride, (wd + stride - 1) // stride
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r, q = i * stride + di - p, j * stride + dj - p
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[bi, ic, r, q] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def test_conv_ones_kernel_center_and_corners():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).value
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 0, 2] == out[0, 0, 2, 0] == out[0, 0, 2, 2] == 4


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).value, x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_six_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).value
    assert got.shape == (1, 3, 8 // stride, 8 // stride)
    assert np.abs(got - naive_conv(x, w, b, stride)).max() < 1e-10


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def _conv_grads(upstream):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    T.conv2d(x, w, b).backward(upstream)
    return x, w, b


def test_conv_zero_upstream_gives_zero_grads():
    x, w, b = _conv_grads(np.zeros((2, 3, 6, 6)))
    for t in (x, w, b):
        assert not t.grad.any()


def test_conv_bias_grad_is_channel_sum():
    g = np.random.default_rng(5).standard_normal((2, 3, 6, 6))
    _, _, b = _conv_grads(g)
    np.testing.assert_allclose(b.grad, g.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_leaky_relu_values_and_tie():
    x = Tensor(np.array([2.0, -1.0, 0.0]), requires_grad=True)
    y = T.leaky_relu(x, 0.2)
    np.testing.assert_allclose(y.value, [2.0, -0.2, 0.0])
    T.sum_all(y).backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.2, 1.0])
    with pytest.raises(ValueError):
        T.leaky_relu(x, 1.5)


def test_leaky_relu_fd_tight():
    # away from the kink the difference quotient is exact up to rounding
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 6, 6))
    x = np.sign(x) * (0.05 + np.abs(x))
    err, _, skipped = check_function(lambda a: T.leaky_relu(a, 0.2), [x])
    assert err < 1e-6 and skipped == 0


def test_upsample_blocks_and_mean_pool_inverse():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    up = T.upsample_nearest2x(Tensor(x)).value
    np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    pooled = up.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_array_equal(pooled, x)


def test_upsample_fd_tight():
    x = np.random.default_rng(3).standard_normal((1, 2, 3, 4))
    err, _, _ = check_function(T.upsample_nearest2x, [x])
    assert err < 1e-6


def test_concat_channels():
    a, b = np.ones((1, 2, 3, 3)), np.zeros((1, 1, 3, 3))
    out = T.concat([Tensor(a), Tensor(b)]).value
    assert out.shape == (1, 3, 3, 3)
    assert out[:, :2].all() and not out[:, 2].any()


def test_sigmoid_is_bounded_and_stable():
    v = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).value
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0])


def test_nan_guard_names_layer():
    x = Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError, match="my_layer"):
        T.leaky_relu(x, 0.2, name="my_layer")


def test_nan_gradient_aborts_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.mul(x, 2.0, name="scale")
    with pytest.raises(NonFiniteError, match="gradient"):
        T.sum_all(y).backward(np.array(np.inf))


# -- Adam --------------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    p = Parameter(np.array([0.3, -1.2]))
    p.grad = np.zeros(2)
    adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.value, [0.3, -1.2])
    assert p.grad is None and p.step == 1


def test_adam_first_step_magnitude_is_lr():
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    adam_step([p], lr=0.001)
    # m_hat = 1, v_hat = 1  ->  update = -lr / (1 + eps)
    np.testing.assert_allclose(p.value, [-0.001 / (1 + 1e-8)], rtol=1e-12)


def test_adam_converges_on_square():
    p = Parameter(np.array([1.0]))
    for _ in range(2000):
        p.grad = 2 * p.value
        adam_step([p], lr=0.01)
    assert abs(p.value[0]) < 1e-3


def test_adam_missing_grad():
    with pytest.raises(ValueError):
        adam_step([Parameter(np.zeros(2), name="w")], lr=0.1)


# -- checkpoint format ---------------------------------------------------------


def test_checkpoint_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(4)
    entries = [("a.weight", rng.standard_normal((2, 3)).astype(np.float32),
                rng.random((2, 3)).astype(np.float32), rng.random((2, 3)).astype(np.float32)),
               ("b", np.float32([7.0]), np.float32([0.0]), np.float32([1.0]))]
    path = tmp_path / "c.bin"
    save_checkpoint(path, entries, step=123)
    raw = path.read_bytes()
    assert raw[:6] == b"SEMSR1"
    assert int.from_bytes(raw[-8:], "little") == 123
    expected_len = 6 + (4 + 8 + 4 + 8 + 3 * 6 * 4) + (4 + 1 + 4 + 4 + 3 * 4) + 8
    assert len(raw) == expected_len
    got, step = load_checkpoint(path)
    assert step == 123
    for name, v, m, s in entries:
        for a, b in zip(got[name], (v, m, s)):
            np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTCKP" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(p)


# -- finite-difference suite -----------------------------------------------------


@pytest.mark.parametrize("name", case_names())
def test_finite_difference_suite(name):
    (res,) = run_suite(trials=20, seed=0, names=[name])
    assert res.trials >= 20
    assert res.passed, res.to_json()
    # kink crossings must stay a small minority of the checked coordinates
    assert res.skipped <= 0.10 * (res.checked + res.skipped)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([4, 6, 8]), st.sampled_from([1, 2]),
       st.integers(0, 2**31))
def test_conv_oracle_property(n, c, o, size, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((o, c, 3, 3))
    b = rng.standard_normal(o)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).value
    assert np.abs(got - naive_conv(x, w, b, stride)).max() < 1e-10
