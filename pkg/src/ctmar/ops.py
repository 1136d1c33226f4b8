"""Differentiable operations on :class:`~ctmar.tensor.Tensor`.

Every op returns a new Tensor and registers a backward closure producing
one gradient array per parent. Convolutions lower to BLAS GEMMs through a
shifted-window matrix; that beats hand-written loops on every machine with
a decent BLAS, so they deliberately live outside the numba kernel set.

Broadcasting is restricted: operands must have equal shapes, be scalars,
or differ only in the batch axis (size 1 vs B). Anything else raises
:class:`ShapeError` naming both shapes.
"""

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _binary_prep(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b
    if a.size == 1 or b.size == 1:
        return a, b
    if (
        a.ndim == b.ndim
        and a.shape[1:] == b.shape[1:]
        and 1 in (a.shape[0], b.shape[0])
    ):
        return a, b
    raise ShapeError(f"incompatible operand shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of the allowed broadcasts)."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    return g.sum(axis=0, keepdims=True)


def add(a, b):
    a, b = _binary_prep(a, b)
    out = a.data + b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _binary_prep(a, b)
    out = a.data - b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _binary_prep(a, b)
    out = a.data * b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._result(
        np.where(mask, x.data, 0), (x,), lambda g: (np.where(mask, g, 0),)
    )


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes only strictly inside the range."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._result(out, (x,), lambda g: (np.where(inside, g, 0),))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (0.5 / out),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != axis and s != base[i] for i, s in enumerate(t.shape)
        ):
            raise ShapeError(f"concat mismatch {base} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), bw)


def slice_channels(x, lo, hi):
    x = as_tensor(x)
    out = x.data[:, lo:hi]

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, lo:hi] = g
        return (dx,)

    return Tensor._result(out, (x,), bw)


def crop_hw(x, height, width):
    """Keep the top-left (height, width) window (decoder/skip alignment)."""
    x = as_tensor(x)
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError(f"cannot crop {x.shape} to ({height}, {width})")
    out = x.data[:, :, :height, :width]

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, :height, :width] = g
        return (dx,)

    return Tensor._result(out, (x,), bw)


def upsample_nearest2x(x):
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), bw)


def maxpool2x2(x):
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    blocks = (
        x.data.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        return (
            d.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w),
        )

    return Tensor._result(out, (x,), bw)


def pad_reflect(x, pad):
    """Reflect-pad the two spatial axes by ``pad`` (no edge repeat)."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect pad {pad} too large for {x.shape}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    def fold(g, axis):
        # adjoint of reflect padding along one axis
        sl = [slice(None)] * g.ndim
        n = g.shape[axis] - 2 * pad

        def take(s):
            sl2 = list(sl)
            sl2[axis] = s
            return g[tuple(sl2)]

        core = take(slice(pad, pad + n)).copy()
        left = take(slice(0, pad))  # padded i maps to source pad - i
        right = take(slice(pad + n, None))  # padded j maps to source n-2-j
        sl3 = [slice(None)] * core.ndim
        sl3[axis] = slice(1, pad + 1)
        core[tuple(sl3)] += np.flip(left, axis=axis)
        sl3[axis] = slice(n - 1 - pad, n - 1)
        core[tuple(sl3)] += np.flip(right, axis=axis)
        return core

    def bw(g):
        return (fold(fold(g, 2), 3),)

    return Tensor._result(out, (x,), bw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D operands, got {x.shape} and {w.shape}")
    bn, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for {x.shape} k={kh} s={s} p={p}")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    )

    def im2col(arr):
        win = np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, bn * ho * wo)

    col = im2col(xp)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (w2 @ col).reshape(cout, bn, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, bn * ho * wo)
        need_x = x.requires_grad
        need_w = w.requires_grad
        # col is captured from the forward pass; rebuilding it would double
        # the im2col cost, and graphs are short-lived so the memory is fine.
        dw = (g2 @ col.T).reshape(w.data.shape) if need_w else None
        dx = None
        if need_x:
            dcol = (w2.T @ g2).reshape(cin, kh, kw, bn, ho, wo)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += dcol[
                        :, u, v
                    ].transpose(1, 0, 2, 3)
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, bw)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=0.1,
    eps=1e-5,
    update_running=True,
):
    """Per-channel batch normalization over (batch, H, W).

    ``running_mean``/``running_var`` are plain ndarrays owned by the layer;
    they are mutated only when ``training and update_running``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d wants NCHW, got {x.shape}")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (dxhat - m1 - xhat * m2) * inv[None, :, None, None]
            else:
                dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), bw)


# -- reductions ------------------------------------------------------


def tsum(x):
    x = as_tensor(x)
    return Tensor._result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.data.shape).copy(),),
    )


def tmean(x):
    x = as_tensor(x)
    n = x.data.size
    return Tensor._result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
    )


def l1_loss(a, b):
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    out = np.asarray(np.abs(d).mean(), dtype=d.dtype)

    def bw(g):
        da = g * np.sign(d) / n
        return da, -da

    return Tensor._result(out, (a, b), bw)


def mse_loss(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean(), dtype=d.dtype)

    def bw(g):
        da = g * 2.0 * d / n
        return da, -da

    return Tensor._result(out, (a, b), bw)


def smooth_l1_loss(a, b, beta=1.0):
    """Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1 shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    out = np.asarray(vals.mean(), dtype=d.dtype)

    def bw(g):
        da = g * np.where(quad, d / beta, np.sign(d)) / n
        return da, -da

    return Tensor._result(out, (a, b), bw)
