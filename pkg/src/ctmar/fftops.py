"""Differentiable 2-D real FFT ops over the spatial axes of NCHW tensors.

Conventions:
  * "ortho" normalization in both directions (1/sqrt(H*W) each way).
  * ``rfft2`` keeps the half spectrum of width floor(W/2)+1.
  * Complex spectra are carried as a :class:`ComplexSpectrum` pair of real
    Tensors; ``complex2real`` stacks them along channels (C -> 2C) and
    ``real2complex`` splits them back. Both are pure data movement, so their
    gradients are permutation adjoints.

``irfft2`` is defined as the real part of the full inverse FFT of the
explicitly Hermitian-extended half spectrum. On true rfft2 output this is
the exact inverse; on non-Hermitian input (which mid-network spectra are,
after channel convolutions and ReLU) it stays a well-defined linear map
with an exact adjoint, rather than inheriting library-specific C2R
behavior. Odd heights/widths are handled natively.

Both transform gradients are exact adjoints of the forward linear maps:

  * rfft2 backward:  Re(ifft2(zero-pad of cotangent to full width))
  * irfft2 backward: fft2 of cotangent, half-spectrum kept, mirrored
    (interior) columns doubled.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor


@dataclass
class ComplexSpectrum:
    """Half-spectrum pair (real, imag), each (B, C, H, floor(W/2)+1)."""

    real: Tensor
    imag: Tensor
    spatial_shape: tuple

    @property
    def shape(self):
        return self.real.shape


def _mirror_rows(h):
    # row h maps to (-h) mod H under conjugate symmetry
    return (-np.arange(h)) % h


def hermitian_extend(g, width):
    """Build the full-width spectrum implied by a half spectrum.

    ``g``: complex (..., H, Wh). Interior columns are mirrored with
    conjugation and row reversal; self-conjugate columns (0 and W/2 for
    even W) pass through as given.
    """
    h, wh = g.shape[-2], g.shape[-1]
    full = np.empty(g.shape[:-1] + (width,), dtype=g.dtype)
    full[..., :wh] = g
    n_tail = width - wh
    if n_tail > 0:
        rows = _mirror_rows(h)
        tail_src = g[..., rows, 1 : n_tail + 1]
        full[..., wh:] = np.conj(tail_src[..., ::-1])
    return full


def _interior_scale(width, wh, dtype):
    """1 for self-conjugate columns, 2 for mirrored ones."""
    c = np.full(wh, 2.0, dtype=dtype)
    c[0] = 1.0
    if width % 2 == 0:
        c[-1] = 1.0
    return c


def rfft2(x):
    """Real 2-D FFT over (H, W) -> ComplexSpectrum, ortho-normalized."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"rfft2 wants NCHW, got {x.shape}")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"spatial extent too small for a 2-d spectrum: {x.shape}")
    spec = np.fft.rfft2(x.data, axes=(2, 3), norm="ortho")
    stacked = np.concatenate([spec.real, spec.imag], axis=1).astype(x.dtype, copy=False)

    def bw(g):
        gr, gi = g[:, :c], g[:, c:]
        pad = np.zeros((b, c, h, w), dtype=np.result_type(gr.dtype, np.complex64))
        pad[..., : spec.shape[-1]] = gr + 1j * gi
        dx = np.fft.ifft2(pad, axes=(2, 3), norm="ortho").real
        return (dx.astype(x.dtype, copy=False),)

    node = Tensor._result(stacked, (x,), bw)
    return ComplexSpectrum(
        real=ops.slice_channels(node, 0, c),
        imag=ops.slice_channels(node, c, 2 * c),
        spatial_shape=(h, w),
    )


def irfft2(s, spatial_shape=None):
    """Inverse of :func:`rfft2`; accepts arbitrary (non-Hermitian) spectra."""
    if spatial_shape is None:
        spatial_shape = s.spatial_shape
    h, w = spatial_shape
    stacked = ops.concat([s.real, s.imag], axis=1)
    c2 = stacked.shape[1]
    c = c2 // 2
    wh = w // 2 + 1
    if stacked.shape[2] != h or stacked.shape[3] != wh:
        raise ShapeError(
            f"spectrum shape {stacked.shape} does not match spatial {spatial_shape}"
        )
    g = stacked.data[:, :c] + 1j * stacked.data[:, c:]
    full = hermitian_extend(g, w)
    out = np.fft.ifft2(full, axes=(2, 3), norm="ortho").real.astype(
        stacked.dtype, copy=False
    )

    def bw(gy):
        spec = np.fft.fft2(gy, axes=(2, 3), norm="ortho")[..., :wh]
        spec = spec * _interior_scale(w, wh, gy.dtype)
        d = np.concatenate([spec.real, spec.imag], axis=1).astype(
            stacked.dtype, copy=False
        )
        return (d,)

    return Tensor._result(out, (stacked,), bw)


def complex2real(s):
    """Stack (real, imag) along channels: C complex -> 2C real."""
    return ops.concat([s.real, s.imag], axis=1)


def real2complex(t, spatial_shape):
    """Split a stacked-real tensor back into a half-spectrum pair."""
    t = as_tensor(t)
    c2 = t.shape[1]
    if c2 % 2:
        raise ShapeError(f"real2complex needs even channel count, got {t.shape}")
    c = c2 // 2
    return ComplexSpectrum(
        real=ops.slice_channels(t, 0, c),
        imag=ops.slice_channels(t, c, c2),
        spatial_shape=tuple(spatial_shape),
    )
