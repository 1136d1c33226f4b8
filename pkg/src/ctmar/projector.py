"""Fan-beam projection operators and filtered backprojection.

Four kernels make up the hot path, each with a numba njit implementation
and a pure-numpy fallback (see :mod:`ctmar.backend` for selection):

  * ray-driven forward projection (Joseph-style: one bilinear sample per
    dominant-axis plane crossing, weighted by the crossing length),
  * its exact adjoint: the same traversal, same weights, scattered,
  * pixel-driven weighted backprojection for FBP,
  * the exact transpose of that backprojection (for FBP gradients).

The adjoint/transpose pairs reuse the forward weights rather than being
independent backprojectors, so ``<P x, y> == <x, P^T y>`` holds to
rounding. Kernels accumulate in float64 regardless of API dtype; wrappers
restore the caller's dtype.

FBP: detector cosine weighting on the virtual (isocenter) detector line,
Ram-Lak filtering via zero-padded FFT (padded to the next power of two at
or above twice the detector count, spatial-domain kernel taps transformed
exactly), then weighted backprojection over the full scan with the
half-turn redundancy factor.
"""

import math

import numpy as np

from .backend import njit, prange, use_numba
from .geometry import FanBeamGeometry
from .tensor import ShapeError, Tensor

# -- numba kernels ----------------------------------------------------


@njit(cache=True, fastmath=True)
def _march_range(k, b, n):
    """Index range of dominant-axis planes where a tap can land.

    The sampled coordinate is affine in the plane index (b + k*plane);
    taps vanish outside (-1, n). Clamped in float before the int cast so
    near-axial rays (k ~ 0) cannot overflow.
    """
    if k > 0.0:
        lo = (-1.0 - b) / k
        hi = (float(n) - b) / k
    elif k < 0.0:
        lo = (float(n) - b) / k
        hi = (-1.0 - b) / k
    elif -1.0 < b < float(n):
        lo, hi = 0.0, float(n - 1)
    else:
        lo, hi = 1.0, 0.0
    if lo < 0.0:
        lo = 0.0
    if hi > float(n - 1):
        hi = float(n - 1)
    if lo > hi:
        return 0, -1
    return int(math.ceil(lo)), int(math.floor(hi))


@njit(cache=True, fastmath=True)
def _k_forward(img, out, sin_a, cos_a, ps, dsp, sod, sdd):
    n = img.shape[0]
    nd, nv = out.shape
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    for v in prange(nv):
        sa, ca = sin_a[v], cos_a[v]
        sx, sy = -sod * sa, sod * ca
        for i in range(nd):
            u = (i - cd) * dsp
            dx = (sdd - sod) * sa + u * ca - sx
            dy = -(sdd - sod) * ca + u * sa - sy
            norm = math.sqrt(dx * dx + dy * dy)
            rx, ry = dx / norm, dy / norm
            acc = 0.0
            if abs(rx) >= abs(ry):
                k = ry / rx
                b = (sy - k * sx) / ps + cx - k * cx
                c0, c1 = _march_range(k, b, n)
                for c in range(c0, c1 + 1):
                    rf = b + k * c
                    r0 = int(math.floor(rf))
                    w = rf - r0
                    if 0 <= r0 < n:
                        acc += (1.0 - w) * img[r0, c]
                    if 0 <= r0 + 1 < n:
                        acc += w * img[r0 + 1, c]
                out[i, v] = acc * ps / abs(rx)
            else:
                k = rx / ry
                b = (sx - k * sy) / ps + cx - k * cx
                r0_, r1_ = _march_range(k, b, n)
                for r in range(r0_, r1_ + 1):
                    cf = b + k * r
                    c0 = int(math.floor(cf))
                    w = cf - c0
                    if 0 <= c0 < n:
                        acc += (1.0 - w) * img[r, c0]
                    if 0 <= c0 + 1 < n:
                        acc += w * img[r, c0 + 1]
                out[i, v] = acc * ps / abs(ry)


@njit(cache=True, fastmath=True)
def _k_adjoint(sino, out, sin_a, cos_a, ps, dsp, sod, sdd):
    # serial: scatters race under threads; same traversal arithmetic as
    # _k_forward so the scattered weights match the gathered ones exactly
    n = out.shape[0]
    nd, nv = sino.shape
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    for v in range(nv):
        sa, ca = sin_a[v], cos_a[v]
        sx, sy = -sod * sa, sod * ca
        for i in range(nd):
            u = (i - cd) * dsp
            dx = (sdd - sod) * sa + u * ca - sx
            dy = -(sdd - sod) * ca + u * sa - sy
            norm = math.sqrt(dx * dx + dy * dy)
            rx, ry = dx / norm, dy / norm
            if abs(rx) >= abs(ry):
                g = sino[i, v] * ps / abs(rx)
                if g != 0.0:
                    k = ry / rx
                    b = (sy - k * sx) / ps + cx - k * cx
                    c0, c1 = _march_range(k, b, n)
                    for c in range(c0, c1 + 1):
                        rf = b + k * c
                        r0 = int(math.floor(rf))
                        w = rf - r0
                        if 0 <= r0 < n:
                            out[r0, c] += (1.0 - w) * g
                        if 0 <= r0 + 1 < n:
                            out[r0 + 1, c] += w * g
            else:
                g = sino[i, v] * ps / abs(ry)
                if g != 0.0:
                    k = rx / ry
                    b = (sx - k * sy) / ps + cx - k * cx
                    r0_, r1_ = _march_range(k, b, n)
                    for r in range(r0_, r1_ + 1):
                        cf = b + k * r
                        c0 = int(math.floor(cf))
                        w = cf - c0
                        if 0 <= c0 < n:
                            out[r, c0] += (1.0 - w) * g
                        if 0 <= c0 + 1 < n:
                            out[r, c0 + 1] += w * g


@njit(cache=True, fastmath=True)
def _k_backproject(q, out, sin_a, cos_a, ps, dv, sod, scale):
    n = out.shape[0]
    nd, nv = q.shape
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    inv_dv = sod / dv
    for r in prange(n):
        y = (r - cx) * ps
        for c in range(n):
            x = (c - cx) * ps
            acc = 0.0
            for v in range(nv):
                sa, ca = sin_a[v], cos_a[v]
                inv_ell = 1.0 / (sod + x * sa - y * ca)
                fi = (x * ca + y * sa) * inv_ell * inv_dv + cd
                i0 = int(math.floor(fi))
                w = fi - i0
                qv = 0.0
                if 0 <= i0 < nd:
                    qv += (1.0 - w) * q[i0, v]
                if 0 <= i0 + 1 < nd:
                    qv += w * q[i0 + 1, v]
                acc += qv * inv_ell * inv_ell
            out[r, c] = acc * scale


@njit(cache=True, fastmath=True)
def _k_backproject_t(img, out, sin_a, cos_a, ps, dv, sod, scale):
    n = img.shape[0]
    nd, nv = out.shape
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    inv_dv = sod / dv
    for v in prange(nv):
        sa, ca = sin_a[v], cos_a[v]
        for r in range(n):
            y = (r - cx) * ps
            for c in range(n):
                x = (c - cx) * ps
                inv_ell = 1.0 / (sod + x * sa - y * ca)
                fi = (x * ca + y * sa) * inv_ell * inv_dv + cd
                i0 = int(math.floor(fi))
                w = fi - i0
                val = img[r, c] * scale * inv_ell * inv_ell
                if 0 <= i0 < nd:
                    out[i0, v] += (1.0 - w) * val
                if 0 <= i0 + 1 < nd:
                    out[i0 + 1, v] += w * val


# -- numpy fallbacks ---------------------------------------------------


def _rays(geom, v_sin, v_cos):
    nd = geom.num_detectors
    u = (np.arange(nd) - (nd - 1) * 0.5) * geom.detector_spacing
    sx, sy = -geom.source_distance * v_sin, geom.source_distance * v_cos
    dx = (geom.detector_distance - geom.source_distance) * v_sin + u * v_cos - sx
    dy = -(geom.detector_distance - geom.source_distance) * v_cos + u * v_sin - sy
    norm = np.hypot(dx, dy)
    return sx, sy, dx / norm, dy / norm


def _np_forward(img, geom):
    n = geom.image_size
    nd, nv = geom.sinogram_shape
    ps = geom.pixel_spacing
    cx = (n - 1) * 0.5
    out = np.zeros((nd, nv))
    ang = geom.view_angles
    for v in range(nv):
        sx, sy, rx, ry = _rays(geom, math.sin(ang[v]), math.cos(ang[v]))
        for xdom in (True, False):
            sel = np.abs(rx) >= np.abs(ry) if xdom else np.abs(rx) < np.abs(ry)
            if not sel.any():
                continue
            rxs, rys = rx[sel], ry[sel]
            if xdom:
                slope = rys / rxs
                base = (sy - slope * sx) / ps + cx - slope * cx
            else:
                slope = rxs / rys
                base = (sx - slope * sy) / ps + cx - slope * cx
            acc = np.zeros(rxs.shape)
            for k in range(n):
                f = base + slope * k
                i0 = np.floor(f).astype(np.int64)
                w = f - i0
                for tap, wt in ((i0, 1.0 - w), (i0 + 1, w)):
                    ok = (tap >= 0) & (tap < n)
                    idx = np.clip(tap, 0, n - 1)
                    vals = img[idx, k] if xdom else img[k, idx]
                    acc += np.where(ok, wt * vals, 0.0)
            out[sel, v] = acc * ps / np.abs(rxs if xdom else rys)
    return out


def _np_adjoint(sino, geom):
    n = geom.image_size
    nd, nv = geom.sinogram_shape
    ps = geom.pixel_spacing
    cx = (n - 1) * 0.5
    out = np.zeros((n, n))
    ang = geom.view_angles
    for v in range(nv):
        sx, sy, rx, ry = _rays(geom, math.sin(ang[v]), math.cos(ang[v]))
        for xdom in (True, False):
            sel = np.abs(rx) >= np.abs(ry) if xdom else np.abs(rx) < np.abs(ry)
            if not sel.any():
                continue
            rxs, rys = rx[sel], ry[sel]
            g = sino[sel, v] * ps / np.abs(rxs if xdom else rys)
            if xdom:
                slope = rys / rxs
                base = (sy - slope * sx) / ps + cx - slope * cx
            else:
                slope = rxs / rys
                base = (sx - slope * sy) / ps + cx - slope * cx
            for k in range(n):
                f = base + slope * k
                i0 = np.floor(f).astype(np.int64)
                w = f - i0
                for tap, wt in ((i0, 1.0 - w), (i0 + 1, w)):
                    ok = (tap >= 0) & (tap < n)
                    idx = np.clip(tap, 0, n - 1)
                    vals = np.where(ok, wt * g, 0.0)
                    if xdom:
                        np.add.at(out, (idx, k), vals)
                    else:
                        np.add.at(out, (k, idx), vals)
    return out


def _np_backproject(q, geom, scale):
    n = geom.image_size
    nd, nv = geom.sinogram_shape
    ps = geom.pixel_spacing
    dv = _virtual_spacing(geom)
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    coords = (np.arange(n) - cx) * ps
    X = coords[None, :]
    Y = coords[:, None]
    ang = geom.view_angles
    out = np.zeros((n, n))
    for v in range(nv):
        sa, ca = math.sin(ang[v]), math.cos(ang[v])
        ell = geom.source_distance + X * sa - Y * ca
        fi = (X * ca + Y * sa) * geom.source_distance / (ell * dv) + cd
        i0 = np.floor(fi).astype(np.int64)
        w = fi - i0
        qv = np.zeros_like(ell)
        for tap, wt in ((i0, 1.0 - w), (i0 + 1, w)):
            ok = (tap >= 0) & (tap < nd)
            qv += np.where(ok, wt * q[np.clip(tap, 0, nd - 1), v], 0.0)
        out += qv / (ell * ell)
    return out * scale


def _np_backproject_t(img, geom, scale):
    n = geom.image_size
    nd, nv = geom.sinogram_shape
    ps = geom.pixel_spacing
    dv = _virtual_spacing(geom)
    cx = (n - 1) * 0.5
    cd = (nd - 1) * 0.5
    coords = (np.arange(n) - cx) * ps
    X = coords[None, :]
    Y = coords[:, None]
    ang = geom.view_angles
    out = np.zeros((nd, nv))
    for v in range(nv):
        sa, ca = math.sin(ang[v]), math.cos(ang[v])
        ell = geom.source_distance + X * sa - Y * ca
        fi = (X * ca + Y * sa) * geom.source_distance / (ell * dv) + cd
        i0 = np.floor(fi).astype(np.int64)
        w = fi - i0
        val = img * scale / (ell * ell)
        for tap, wt in ((i0, 1.0 - w), (i0 + 1, w)):
            ok = (tap >= 0) & (tap < nd)
            np.add.at(
                out[:, v], np.clip(tap, 0, nd - 1).ravel(), (np.where(ok, wt * val, 0.0)).ravel()
            )
    return out


# -- dispatch ----------------------------------------------------------


def _virtual_spacing(geom):
    return geom.detector_spacing * geom.source_distance / geom.detector_distance


def _angle_tables(geom):
    ang = geom.view_angles
    return np.sin(ang), np.cos(ang)


def _bp_scale(geom):
    dbeta = math.radians(geom.angular_range) / geom.num_views
    return geom.source_distance**2 * dbeta * 0.5


def forward_project(img, geom: FanBeamGeometry):
    """Line integrals of ``img`` (N x N) -> sinogram (detectors x views).

    Accepts an ndarray (plain evaluation) or a Tensor (differentiable; the
    backward pass applies the exact adjoint).
    """
    if isinstance(img, Tensor):
        out = forward_project(img.data, geom)
        return Tensor._result(
            out, (img,), lambda g: (adjoint_project(g, geom).astype(img.dtype, copy=False),)
        )
    img = np.asarray(img)
    if img.shape != (geom.image_size, geom.image_size):
        raise ShapeError(
            f"image shape {img.shape} does not match geometry {geom.image_size}"
        )
    work = np.ascontiguousarray(img, dtype=np.float64)
    if use_numba():
        sin_a, cos_a = _angle_tables(geom)
        out = np.zeros(geom.sinogram_shape)
        _k_forward(
            work,
            out,
            sin_a,
            cos_a,
            geom.pixel_spacing,
            geom.detector_spacing,
            geom.source_distance,
            geom.detector_distance,
        )
    else:
        out = _np_forward(work, geom)
    return out.astype(img.dtype, copy=False)


def adjoint_project(sino, geom: FanBeamGeometry):
    """Exact adjoint of :func:`forward_project` (same weights, scattered)."""
    if isinstance(sino, Tensor):
        out = adjoint_project(sino.data, geom)
        return Tensor._result(
            out, (sino,), lambda g: (forward_project(g, geom).astype(sino.dtype, copy=False),)
        )
    sino = np.asarray(sino)
    if sino.shape != geom.sinogram_shape:
        raise ShapeError(
            f"sinogram shape {sino.shape} does not match geometry {geom.sinogram_shape}"
        )
    work = np.ascontiguousarray(sino, dtype=np.float64)
    if use_numba():
        sin_a, cos_a = _angle_tables(geom)
        out = np.zeros((geom.image_size, geom.image_size))
        _k_adjoint(
            work,
            out,
            sin_a,
            cos_a,
            geom.pixel_spacing,
            geom.detector_spacing,
            geom.source_distance,
            geom.detector_distance,
        )
    else:
        out = _np_adjoint(work, geom)
    return out.astype(sino.dtype, copy=False)


def _ramp_taps(nd, dv):
    """Spatial Ram-Lak taps h[-nd+1 .. nd-1] laid out for circular FFT use."""
    p = 1
    while p < 2 * nd:
        p *= 2
    h = np.zeros(p)
    h[0] = 1.0 / (4.0 * dv * dv)
    for m in range(1, nd, 2):
        val = -1.0 / (math.pi * math.pi * m * m * dv * dv)
        h[m] = val
        h[p - m] = val
    return h


def _apply_ramp(g, geom):
    """Symmetric (self-adjoint) Ram-Lak convolution along the detector axis."""
    nd = geom.num_detectors
    dv = _virtual_spacing(geom)
    h = _ramp_taps(nd, dv)
    p = h.shape[0]
    spec = np.fft.rfft(h)
    gp = np.zeros((p, g.shape[1]))
    gp[:nd] = g
    q = np.fft.irfft(np.fft.rfft(gp, axis=0) * spec[:, None], n=p, axis=0)[:nd]
    return q * dv


def _det_weights(geom):
    nd = geom.num_detectors
    dv = _virtual_spacing(geom)
    uv = (np.arange(nd) - (nd - 1) * 0.5) * dv
    return geom.source_distance / np.sqrt(geom.source_distance**2 + uv * uv)


def _backproject(q, geom):
    if use_numba():
        sin_a, cos_a = _angle_tables(geom)
        out = np.zeros((geom.image_size, geom.image_size))
        _k_backproject(
            np.ascontiguousarray(q, np.float64),
            out,
            sin_a,
            cos_a,
            geom.pixel_spacing,
            _virtual_spacing(geom),
            geom.source_distance,
            _bp_scale(geom),
        )
        return out
    return _np_backproject(np.asarray(q, np.float64), geom, _bp_scale(geom))


def _backproject_t(img, geom):
    if use_numba():
        sin_a, cos_a = _angle_tables(geom)
        out = np.zeros(geom.sinogram_shape)
        _k_backproject_t(
            np.ascontiguousarray(img, np.float64),
            out,
            sin_a,
            cos_a,
            geom.pixel_spacing,
            _virtual_spacing(geom),
            geom.source_distance,
            _bp_scale(geom),
        )
        return out
    return _np_backproject_t(np.asarray(img, np.float64), geom, _bp_scale(geom))


def fbp(sino, geom: FanBeamGeometry):
    """Filtered backprojection -> attenuation image (1/cm).

    Linear in the sinogram; the Tensor path's backward applies the exact
    transpose (weights -> symmetric ramp -> backprojection transpose).
    """
    if isinstance(sino, Tensor):
        out = fbp(sino.data, geom)

        def bw(g):
            ds = _det_weights(geom)[:, None] * _apply_ramp(
                _backproject_t(np.asarray(g, np.float64), geom), geom
            )
            return (ds.astype(sino.dtype, copy=False),)

        return Tensor._result(out, (sino,), bw)
    sino = np.asarray(sino)
    if sino.shape != geom.sinogram_shape:
        raise ShapeError(
            f"sinogram shape {sino.shape} does not match geometry {geom.sinogram_shape}"
        )
    work = np.asarray(sino, np.float64)
    q = _apply_ramp(_det_weights(geom)[:, None] * work, geom)
    return _backproject(q, geom).astype(sino.dtype, copy=False)


def _check_nchw(shape, geom):
    if len(shape) != 4 or shape[1] != 1 or shape[2:] != geom.sinogram_shape:
        raise ShapeError(
            f"expected (B, 1, {geom.sinogram_shape[0]}, {geom.sinogram_shape[1]}), got {shape}"
        )


def fbp_nchw(x, geom: FanBeamGeometry):
    """Batched FBP: (B, 1, detectors, views) -> (B, 1, N, N).

    Single graph node; forward and backward loop the 2-d kernels over the
    batch axis, so per-sample work still runs on the compiled path.
    """
    if isinstance(x, Tensor):
        _check_nchw(x.data.shape, geom)
        out = np.stack([fbp(x.data[b, 0], geom) for b in range(x.data.shape[0])])

        def bw(g):
            g = np.asarray(g)
            ds = np.stack(
                [
                    _det_weights(geom)[:, None]
                    * _apply_ramp(
                        _backproject_t(np.asarray(g[b, 0], np.float64), geom), geom
                    )
                    for b in range(g.shape[0])
                ]
            )
            return (ds[:, None].astype(x.dtype, copy=False),)

        return Tensor._result(out[:, None].astype(x.dtype, copy=False), (x,), bw)
    x = np.asarray(x)
    _check_nchw(x.shape, geom)
    out = np.stack([fbp(x[b, 0], geom) for b in range(x.shape[0])])
    return out[:, None].astype(x.dtype, copy=False)
