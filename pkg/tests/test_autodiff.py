import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speckletact import autodiff as ad
from speckletact.autodiff import Tape, Tensor
from speckletact.errors import InvalidArgument, ShapeError

SEEDS = range(20)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def target_like(shape, rng):
    return rng.standard_normal(shape)


# --- forward examples --------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    y = ad.conv2d(x, w, np.zeros(1)).data
    np.testing.assert_array_equal(y, x)


def test_conv_ones_padding_arithmetic():
    x = np.ones((1, 1, 5, 5))
    y = ad.conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1)).data[0, 0]
    assert y[2, 2] == 9 and y[0, 0] == 4 and y[0, 2] == 6


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        ad.conv2d(rng.standard_normal((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        ad.conv2d(rng.standard_normal((2, 4, 4)), np.zeros((3, 1, 3, 3)), np.zeros(3))


def test_batchnorm_constant_input():
    st_ = ad.BatchNormState.fresh(2, np.float64)
    x = np.full((3, 2, 4, 4), 7.0)
    y = ad.batchnorm(x, np.ones(2), np.zeros(2), st_, train=True).data
    assert np.all(y == 0)
    y = ad.batchnorm(x, np.ones(2), np.full(2, 5.0), ad.BatchNormState.fresh(2, np.float64), train=True).data
    assert np.all(y == 5.0)


def test_batchnorm_running_stats_and_eval(rng):
    st_ = ad.BatchNormState.fresh(3, np.float64)
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    ad.batchnorm(x, np.ones(3), np.zeros(3), st_, train=True)
    n = 4 * 25
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    # eval before training uses mean 0, var 1
    fresh = ad.BatchNormState.fresh(3, np.float64)
    y = ad.batchnorm(x, np.ones(3), np.zeros(3), fresh, train=False).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5))


def test_batchnorm_train_standardizes(rng):
    x = rng.standard_normal((8, 16)) * 3 - 2
    y = ad.batchnorm(x, np.ones(16), np.zeros(16), ad.BatchNormState.fresh(16, np.float64), train=True).data
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5), rtol=1e-10)


def test_batchnorm_needs_two_values():
    with pytest.raises(ShapeError):
        ad.batchnorm(np.ones((1, 3)), np.ones(3), np.zeros(3), ad.BatchNormState.fresh(3), train=True)


def test_relu_and_pool_examples():
    assert ad.relu(np.array([-3.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0
    with pytest.raises(ShapeError):
        ad.maxpool2x2(np.ones((1, 1, 3, 4)))


def test_pool_tie_goes_to_first():
    x = T([[[[5.0, 5.0], [0.0, 0.0]]]])
    with Tape() as tape:
        y = ad.maxpool2x2(x)
    tape.backward(y, np.ones((1, 1, 1, 1)))
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_pool_of_upsampled_constant_is_identity(rng):
    v = rng.standard_normal((2, 3, 4, 4))
    up = v.repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_array_equal(ad.maxpool2x2(up).data, v)


def test_linear_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.linear(x, np.eye(4), np.zeros(4)).data, x)
    b = np.array([1.0, -2.0])
    assert np.all(ad.linear(x, np.zeros((2, 4)), b).data == b)
    with pytest.raises(ShapeError):
        ad.linear(x, np.zeros((2, 5)), b)


def test_cross_entropy_uniform_logits():
    loss = ad.softmax_cross_entropy(np.zeros((5, 9)), np.arange(5)).data
    assert float(loss) == pytest.approx(math.log(9))
    assert float(ad.mse(np.ones((3, 1)), np.ones((3, 1))).data) == 0.0


def test_cross_entropy_label_errors():
    with pytest.raises(InvalidArgument):
        ad.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InvalidArgument):
        ad.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, -1]))


def test_cross_entropy_gradient_analytic(rng):
    z = T(rng.standard_normal((4, 5)))
    y = np.array([0, 4, 2, 2])
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(z, y)
    tape.backward(loss)
    onehot = np.eye(5)[y]
    np.testing.assert_allclose(z.grad, (ad.softmax(z.data) - onehot) / 4, rtol=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(2, 10))
def test_softmax_rows_are_distributions(seed, n, k):
    z = np.random.default_rng(seed).standard_normal((n, k)) * 30
    p = ad.softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_gradients_accumulate_when_reused(rng):
    w = T(rng.standard_normal((2, 3)))
    x = rng.standard_normal((4, 3))
    with Tape() as tape:
        a = ad.linear(x, w, np.zeros(2))
        b = ad.linear(x, w, np.zeros(2))
    tape.backward(a, np.ones((4, 2)))
    g1 = w.grad.copy()
    w.grad = None
    with Tape() as tape:
        a = ad.linear(x, w, np.zeros(2))
        b = ad.linear(x, w, np.zeros(2))
    tape.backward(b, np.ones((4, 2)))
    tape.backward(a, np.ones((4, 2)))
    np.testing.assert_allclose(w.grad, 2 * g1)


def test_no_tape_records_nothing(rng):
    w = T(rng.standard_normal((2, 3)))
    out = ad.linear(rng.standard_normal((1, 3)), w, np.zeros(2))
    assert not out.requires_grad


# --- finite-difference checks per primitive (20 seeds each) ---------------

def _check(loss_fn, params, seed):
    report = ad.grad_check(loss_fn, params, seed=seed)
    assert report.passed, str(report)
    return report


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_conv2d(seed):
    rng = np.random.default_rng(seed)
    p = {"x": T(rng.standard_normal((1, 2, 6, 6))), "w": T(rng.standard_normal((3, 2, 3, 3))),
         "b": T(rng.standard_normal(3))}
    tgt = target_like((1, 3, 6, 6), rng)
    _check(lambda: ad.mse(ad.conv2d(p["x"], p["w"], p["b"]), tgt), p, seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("train", [True, False])
def test_gradcheck_batchnorm2d(seed, train):
    rng = np.random.default_rng(seed)
    p = {"x": T(rng.standard_normal((3, 2, 3, 4)) * 2 + 1), "g": T(rng.uniform(0.5, 2, 2)),
         "b": T(rng.standard_normal(2))}
    tgt = target_like((3, 2, 3, 4), rng)
    stats = ad.BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2, 2))

    def loss():
        s = ad.BatchNormState(stats.running_mean.copy(), stats.running_var.copy())
        return ad.mse(ad.batchnorm(p["x"], p["g"], p["b"], s, train), tgt)
    _check(loss, p, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_batchnorm1d(seed):
    rng = np.random.default_rng(seed)
    p = {"x": T(rng.standard_normal((5, 4))), "g": T(rng.uniform(0.5, 2, 4)), "b": T(rng.standard_normal(4))}
    tgt = target_like((5, 4), rng)
    _check(lambda: ad.mse(ad.batchnorm(p["x"], p["g"], p["b"], ad.BatchNormState.fresh(4, np.float64), True),
                          tgt), p, seed)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_relu(seed):
    rng = np.random.default_rng(seed)
    p = {"x": T(_away_from_zero(rng, (3, 7)))}
    tgt = target_like((3, 7), rng)
    _check(lambda: ad.mse(ad.relu(p["x"]), tgt), p, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced far apart relative to the step: no argmax switches
    x = rng.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.1 + 0.05
    p = {"x": T(x)}
    tgt = target_like((2, 2, 2, 3), rng)
    _check(lambda: ad.mse(ad.maxpool2x2(p["x"]), tgt), p, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_linear(seed):
    rng = np.random.default_rng(seed)
    p = {"x": T(rng.standard_normal((4, 5))), "w": T(rng.standard_normal((3, 5))), "b": T(rng.standard_normal(3))}
    tgt = target_like((4, 3), rng)
    _check(lambda: ad.mse(ad.linear(ad.flatten(p["x"]), p["w"], p["b"]), tgt), p, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    p = {"z": T(rng.standard_normal((6, 4)))}
    y = rng.integers(0, 4, 6)
    _check(lambda: ad.softmax_cross_entropy(p["z"], y), p, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_mse(seed):
    rng = np.random.default_rng(seed)
    p = {"y": T(rng.standard_normal((6, 1)))}
    t = rng.standard_normal((6, 1))
    _check(lambda: ad.mse(p["y"], t), p, seed)


def test_gradcheck_flags_faulty_backward(rng):
    p = {"x": T(rng.standard_normal((1, 2, 6, 6))), "w": T(rng.standard_normal((3, 2, 3, 3))),
         "b": T(rng.standard_normal(3))}
    tgt = target_like((1, 3, 6, 6), rng)
    ad._FAULTY_BACKWARD.add("conv2d")
    try:
        report = ad.grad_check(lambda: ad.mse(ad.conv2d(p["x"], p["w"], p["b"]), tgt), p)
    finally:
        ad._FAULTY_BACKWARD.discard("conv2d")
    assert not report.passed
    assert report.errors["w"] > 1e-3 and report.errors["x"] < 1e-4


def test_gradcheck_requires_float64():
    with pytest.raises(InvalidArgument):
        ad.grad_check(lambda: None, {"w": Tensor(np.zeros(2, dtype=np.float32))})


def test_report_str():
    r = ad.GradCheckReport({"a": 1e-6, "b": 2e-3}, 1e-4)
    assert not r.passed and r.max_error == 2e-3
    assert "FAIL" in str(r) and "b: 2.000e-03" in str(r)
