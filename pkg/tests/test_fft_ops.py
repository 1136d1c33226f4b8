"""Half-spectrum FFT ops: numpy oracles, round trips, gradients."""

import numpy as np
import pytest

from ctmar import fftops, ops
from ctmar.gradcheck import grad_check
from ctmar.tensor import ShapeError, Tensor


def test_rfft2_matches_numpy_ortho():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 10))
    spec = fftops.rfft2(Tensor(x))
    want = np.fft.rfft2(x, norm="ortho")
    assert np.allclose(spec.real.data, want.real, atol=1e-6)
    assert np.allclose(spec.imag.data, want.imag, atol=1e-6)


@pytest.mark.parametrize("h,w", [(2, 2), (4, 6), (5, 5), (5, 8), (8, 5), (7, 9), (16, 16)])
def test_roundtrip_even_and_odd_sizes(h, w):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.standard_normal((1, 2, h, w))
    y = fftops.irfft2(fftops.rfft2(Tensor(x)))
    assert y.shape == x.shape
    assert np.allclose(y.data, x, atol=1e-6)


def test_small_spatial_extent_rejected():
    with pytest.raises(ShapeError):
        fftops.rfft2(Tensor(np.zeros((1, 1, 1, 8))))
    with pytest.raises(ShapeError):
        fftops.rfft2(Tensor(np.zeros((1, 1, 8, 1))))


def test_hermitian_extend_matches_full_fft():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 6, 7))
    spec = fftops.rfft2(Tensor(x))
    full = np.fft.fft2(x, norm="ortho")
    ext = fftops.hermitian_extend(spec.real.data + 1j * spec.imag.data, 7)
    assert np.allclose(ext, full, atol=1e-6)


def test_complex_real_stack_roundtrip():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 6))
    spec = fftops.rfft2(Tensor(x))
    stacked = fftops.complex2real(spec)
    assert stacked.shape[1] == 6  # real and imag stacked over channels
    back = fftops.real2complex(stacked, spec.spatial_shape)
    assert np.array_equal(back.real.data, spec.real.data)
    assert np.array_equal(back.imag.data, spec.imag.data)
    y = fftops.irfft2(back)
    assert np.allclose(y.data, x, atol=1e-6)


def test_parseval_energy_preserved():
    # ortho normalization keeps the L2 norm up to half-spectrum weighting
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 8, 8))
    y = fftops.irfft2(fftops.rfft2(Tensor(x)))
    assert np.isclose(np.sum(y.data**2), np.sum(x**2), atol=1e-8)


def test_spectrum_linear_in_input():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((1, 1, 6, 6))
    b = rng.standard_normal((1, 1, 6, 6))
    sa = fftops.rfft2(Tensor(a))
    sb = fftops.rfft2(Tensor(b))
    sab = fftops.rfft2(Tensor(a + b))
    assert np.allclose(sab.real.data, sa.real.data + sb.real.data, atol=1e-6)
    assert np.allclose(sab.imag.data, sa.imag.data + sb.imag.data, atol=1e-6)


def test_roundtrip_gradient_is_identity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
    y = fftops.irfft2(fftops.rfft2(x))
    ops.tsum(y).backward()
    # d(sum irfft(rfft(x)))/dx = 1 everywhere
    assert np.allclose(x.grad, 1.0, atol=1e-6)


def test_odd_width_gradcheck():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 2, 5, 7)).astype(np.float64))
    w = Tensor(rng.standard_normal((1, 2, 5, 7)).astype(np.float64))

    def f(x, w):
        return ops.tsum(ops.mul(fftops.irfft2(fftops.rfft2(x)), w))

    assert grad_check(f, [x, w]) < 1e-4
