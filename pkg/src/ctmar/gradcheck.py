"""Finite-difference gradient verification.

``grad_check`` compares reverse-mode gradients of a scalar-valued callable
against central differences and returns the worst relative error

    max over coordinates of |analytic - numeric| / max(1, |numeric|)

computed in float64. Non-finite values anywhere are an error. A registry of
standard layer checks backs the ``ctmar gradcheck`` CLI command.
"""

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def grad_check(f, inputs, eps=DEFAULT_EPS):
    """Worst-case relative gradient error of ``f`` w.r.t. ``inputs``.

    ``f`` maps the given Tensors to a scalar Tensor. Inputs should be
    float64 for the tolerances to be meaningful; they get
    ``requires_grad`` set here.
    """
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("grad_check inputs must be Tensors")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value in grad_check")
    out.backward()
    analytic = []
    for t in inputs:
        g = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite analytic gradient in grad_check")
        analytic.append(g.reshape(-1).copy())

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                hi = float(f(*inputs).data)
                flat[i] = keep - eps
                lo = float(f(*inputs).data)
                flat[i] = keep
                num = (hi - lo) / (2.0 * eps)
                if not np.isfinite(num):
                    raise FloatingPointError("non-finite numeric gradient in grad_check")
                err = abs(ga[i] - num) / max(1.0, abs(num))
                if err > worst:
                    worst = err
    return worst


# -- standard check registry (used by the CLI and the test suite) -----


def _rng(seed):
    return np.random.default_rng(seed)


def _t(arr):
    return Tensor(np.asarray(arr, np.float64))


def _standard_checks():
    from . import fftops, ops

    r = _rng(20240816)

    def conv_s1():
        x = _t(r.standard_normal((2, 3, 6, 7)))
        w = _t(0.3 * r.standard_normal((4, 3, 3, 3)))
        b = _t(0.1 * r.standard_normal(4))
        return grad_check(
            lambda x, w, b: ops.tsum(ops.mul(ops.conv2d(x, w, b, 1, 1), ops.conv2d(x, w, b, 1, 1))),
            [x, w, b],
        )

    def conv_s2():
        x = _t(r.standard_normal((2, 3, 8, 9)))
        w = _t(0.3 * r.standard_normal((5, 3, 3, 3)))
        b = _t(0.1 * r.standard_normal(5))
        return grad_check(lambda x, w, b: ops.tsum(ops.conv2d(x, w, b, 2, 1)), [x, w, b])

    def bn_train():
        x = _t(r.standard_normal((3, 4, 5, 5)))
        gm = _t(1.0 + 0.2 * r.standard_normal(4))
        bt = _t(0.2 * r.standard_normal(4))
        rm, rv = np.zeros(4), np.ones(4)

        def f(x, gm, bt):
            y = ops.batchnorm2d(x, gm, bt, rm, rv, training=True, update_running=False)
            return ops.tsum(ops.mul(y, y))

        return grad_check(f, [x, gm, bt])

    def bn_eval():
        x = _t(r.standard_normal((2, 4, 5, 5)))
        gm = _t(1.0 + 0.2 * r.standard_normal(4))
        bt = _t(0.2 * r.standard_normal(4))
        rm = 0.3 * r.standard_normal(4)
        rv = 1.0 + 0.5 * r.random(4)

        def f(x, gm, bt):
            y = ops.batchnorm2d(x, gm, bt, rm, rv, training=False)
            return ops.tsum(ops.mul(y, y))

        return grad_check(f, [x, gm, bt])

    def relu_op():
        # keep values away from the kink
        x = _t(r.standard_normal((2, 3, 5, 5)))
        x.data[np.abs(x.data) < 0.1] += 0.2
        return grad_check(lambda x: ops.tsum(ops.mul(ops.relu(x), ops.relu(x))), [x])

    def elementwise():
        a = _t(r.standard_normal((2, 3, 4, 4)))
        b = _t(r.standard_normal((2, 3, 4, 4)))
        return grad_check(
            lambda a, b: ops.tsum(ops.mul(ops.add(a, b), ops.sub(a, ops.mul(b, b)))),
            [a, b],
        )

    def reducers():
        a = _t(r.standard_normal((2, 3, 4, 4)))
        b = _t(r.standard_normal((2, 3, 4, 4)))
        # stay away from |d| = beta and d = 0 kinks
        d = a.data - b.data
        b.data[np.abs(np.abs(d) - 1.0) < 0.05] += 0.1
        b.data[np.abs(a.data - b.data) < 0.05] += 0.1

        def f(a, b):
            return ops.add(
                ops.add(ops.l1_loss(a, b), ops.smooth_l1_loss(a, b)),
                ops.mse_loss(a, b),
            )

        return grad_check(f, [a, b])

    def fft_pair():
        x = _t(r.standard_normal((2, 2, 5, 6)))
        w = _t(r.standard_normal((2, 2, 5, 6)))

        def f(x, w):
            s = fftops.rfft2(x)
            y = fftops.irfft2(s)
            return ops.tsum(ops.mul(y, w))

        return grad_check(f, [x, w])

    def fft_nonhermitian():
        # push an arbitrary tensor through irfft2's extension path
        x = _t(r.standard_normal((1, 4, 4, 3)))  # stacked 2C with C=2, spatial 4x4

        def f(x):
            s = fftops.real2complex(x, (4, 4))
            y = fftops.irfft2(s)
            return ops.tsum(ops.mul(y, y))

        return grad_check(f, [x])

    def pad_ops():
        x = _t(r.standard_normal((2, 2, 6, 6)))

        def f(x):
            y = ops.pad_reflect(x, 1)
            z = ops.upsample_nearest2x(ops.maxpool2x2(ops.crop_hw(y, 6, 6)))
            return ops.tsum(ops.mul(z, z))

        # maxpool has argmax ties of measure zero on random input
        return grad_check(f, [x])

    def spectral_block():
        from .networks import SpectralBlock

        blk = SpectralBlock(_rng(11), 4)
        blk.cast(np.float64)
        x = _t(r.standard_normal((1, 4, 6, 6)))
        free = [
            x,
            blk.l2l.w,
            blk.g2l.w,
            blk.l2g.w,
            blk.fourier.conv.w,
            blk.bn_l.gamma,
            blk.bn_g.beta,
        ]

        def f(*ts):
            y = blk(ts[0], training=True)
            return ops.tsum(ops.mul(y, y))

        return grad_check(f, free)

    def _away_from(x, points, margin=0.01):
        # finite differences fail on clamp/abs kinks; keep a wide berth
        for c in points:
            x[np.abs(x - c) < margin] += 2.0 * margin
        return x

    _WINDOW_EDGES = (0.0, 1.0, -1.0 / 6.0, 0.1, 8.0 / 30.0)

    def loss_restoration():
        from .losses import restoration_loss

        s_r = _t(r.standard_normal((1, 1, 6, 8)))
        s_gt = _t(r.standard_normal((1, 1, 6, 8)))
        s_r.data[np.abs(s_r.data - s_gt.data) < 0.05] += 0.1
        x_s = _t(_away_from(0.2 + 0.6 * r.random((1, 1, 6, 6)), _WINDOW_EDGES))
        x_gt = _t(_away_from(0.2 + 0.6 * r.random((1, 1, 6, 6)), _WINDOW_EDGES))
        return grad_check(lambda a, b, c, d: restoration_loss(a, b, c, d), [s_r, s_gt, x_s, x_gt])

    def loss_local():
        from .losses import local_loss

        x_u = _t(_away_from(0.2 + 0.6 * r.random((1, 1, 7, 7)), _WINDOW_EDGES))
        x_gt = _t(_away_from(0.2 + 0.6 * r.random((1, 1, 7, 7)), _WINDOW_EDGES))
        x_u.data[np.abs(x_u.data - x_gt.data) < 0.02] += 0.05
        return grad_check(lambda a, b: local_loss(a, b), [x_u, x_gt])

    def loss_refinement():
        from .losses import FeatureExtractor, refinement_loss

        fe = FeatureExtractor(seed=0, width=8)
        x_r = _t(_away_from(r.random((1, 1, 8, 8)), _WINDOW_EDGES))
        x_gt = _t(_away_from(r.random((1, 1, 8, 8)), _WINDOW_EDGES))
        x_r.data[np.abs(x_r.data - x_gt.data) < 0.02] += 0.05
        x_r.data = _away_from(x_r.data, _WINDOW_EDGES)
        return grad_check(lambda a, b: refinement_loss(a, b, fe), [x_r, x_gt])

    def sum_fbp():
        from .geometry import FanBeamGeometry
        from .projector import fbp_nchw

        geom = FanBeamGeometry(
            image_size=12,
            pixel_spacing=1.0,
            num_views=20,
            num_detectors=18,
            detector_spacing=1.4,
            source_distance=30.0,
            detector_distance=60.0,
        )
        x = _t(r.standard_normal((1, 1) + geom.sinogram_shape))
        return grad_check(lambda x: ops.tsum(fbp_nchw(x, geom)), [x])

    checks = {
        "conv2d_stride1": conv_s1,
        "conv2d_stride2": conv_s2,
        "batchnorm_train": bn_train,
        "batchnorm_eval": bn_eval,
        "relu": relu_op,
        "elementwise": elementwise,
        "reducers": reducers,
        "fft_roundtrip": fft_pair,
        "fft_nonhermitian": fft_nonhermitian,
        "pad_pool_upsample": pad_ops,
        "spectral_block": spectral_block,
        "loss_restoration": loss_restoration,
        "loss_local": loss_local,
        "loss_refinement": loss_refinement,
        "sum_fbp": sum_fbp,
    }
    return checks


def run_registry(names=None, tol=DEFAULT_TOL):
    """Run named standard checks; returns {name: worst_rel_err}."""
    checks = _standard_checks()
    if names:
        missing = [n for n in names if n not in checks]
        if missing:
            raise KeyError(f"unknown gradcheck names: {missing}")
        checks = {n: checks[n] for n in names}
    return {name: fn() for name, fn in checks.items()}
