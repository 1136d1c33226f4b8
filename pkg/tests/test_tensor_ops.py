"""Autodiff engine: op semantics against naive oracles, graph mechanics."""

import numpy as np
import pytest

from ctmar import ops
from ctmar.gradcheck import grad_check
from ctmar.tensor import ShapeError, Tensor, no_grad


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Direct-loop cross-correlation used as the conv oracle."""
    bn, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bn, cout, ho, wo), x.dtype)
    for n in range(bn):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, co, i, j] = np.sum(patch * w[co])
            if b is not None:
                out[n, co] += b[co]
    return out


def test_default_dtype_is_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert Tensor(np.zeros(3, np.float64)).dtype == np.float64


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    assert ops.add(a, b).shape == (2, 3, 4, 4)
    assert ops.mul(a, 2.0).shape == (2, 3, 4, 4)
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones((2, 3, 4, 5))))
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones((3, 4, 4))))


def test_batch_broadcast_gradient_sums_over_batch():
    a = Tensor(np.random.default_rng(0).standard_normal((3, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    ops.tsum(ops.mul(a, b)).backward()
    assert b.grad.shape == (1, 2, 2, 2)
    assert np.allclose(b.grad, a.data.sum(axis=0, keepdims=True))


def test_gradient_accumulates_on_reuse():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ops.add(ops.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    ops.tsum(y).backward()
    assert np.allclose(x.grad, 2.0 * x.data + 1.0)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0)
    assert y._bw is None and not y.requires_grad


def test_detach_cuts_history():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.mul(x, 3.0).detach()
    z = ops.tsum(ops.mul(y, 2.0))
    z.backward()
    assert x.grad is None


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 7, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    want = naive_conv2d(x, w, b, stride, padding)
    assert np.allclose(got.data, want, atol=1e-5)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_maxpool_and_upsample_hand_values():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    up = ops.upsample_nearest2x(x)
    want = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    assert np.array_equal(up.data, want)
    pooled = ops.maxpool2x2(up)
    assert np.array_equal(pooled.data, x.data)


def test_maxpool_routes_gradient_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [2.0, 3.0]]]]), requires_grad=True)
    ops.tsum(ops.maxpool2x2(x)).backward()
    assert np.array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_pad_reflect_matches_numpy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 6))
    got = ops.pad_reflect(Tensor(x), 2)
    want = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
    assert np.array_equal(got.data, want)


def test_crop_slice_concat_roundtrip():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 5, 5)).astype(np.float32)
    t = Tensor(x)
    lo = ops.slice_channels(t, 0, 2)
    hi = ops.slice_channels(t, 2, 6)
    back = ops.concat([lo, hi], axis=1)
    assert np.array_equal(back.data, x)
    assert np.array_equal(ops.crop_hw(t, 4, 3).data, x[:, :, :4, :3])


def test_clamp_and_relu_values():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]))
    assert np.array_equal(ops.relu(x).data, [0.0, 0.0, 0.5, 2.0])
    assert np.array_equal(ops.clamp(x, -1.0, 1.0).data, [-1.0, -0.5, 0.5, 1.0])


def test_losses_hand_values():
    a = Tensor(np.full((2, 2), 1.5))
    b = Tensor(np.full((2, 2), 1.0))
    assert np.isclose(ops.l1_loss(a, b).item(), 0.5)
    assert np.isclose(ops.mse_loss(a, b).item(), 0.25)
    # |d| = 0.5 < beta = 1 -> quadratic branch 0.5 d^2
    assert np.isclose(ops.smooth_l1_loss(a, b).item(), 0.125)
    big = Tensor(np.full((2, 2), 4.0))
    assert np.isclose(ops.smooth_l1_loss(big, b).item(), 2.5)  # |d| - beta/2


def test_loss_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_batchnorm_training_updates_running_stats():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 2.0 + 1.0)
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    # output is standardized per channel
    assert np.allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    assert np.allclose(y.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    want_rm = 0.1 * x.data.mean(axis=(0, 2, 3))
    assert np.allclose(rm, want_rm, atol=1e-7)


def test_batchnorm_eval_uses_running_stats_only():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 4))
    rm = np.array([1.0, -1.0, 0.5])
    rv = np.array([4.0, 1.0, 0.25])
    y = ops.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=False)
    want = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    assert np.allclose(y.data, want, atol=1e-6)
    # eval mode must never touch the buffers
    assert np.array_equal(rm, [1.0, -1.0, 0.5])


def test_grad_matches_finite_differences_for_composite():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(0.4 * rng.standard_normal((3, 2, 3, 3)))

    def f(x, w):
        h = ops.conv2d(x, w, padding=1)
        return ops.tsum(ops.mul(h, h))

    assert grad_check(f, [x, w]) < 1e-4


def test_sqrt_gradient():
    x = Tensor(np.array([1.0, 4.0, 9.0]), requires_grad=True)
    ops.tsum(ops.sqrt(x)).backward()
    assert np.allclose(x.grad, 0.5 / np.sqrt(x.data))
