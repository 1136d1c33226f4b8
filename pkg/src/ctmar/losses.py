"""Display windows, network-range normalization, and training losses.

Images cross the network boundary in affine full-window units: the full
display window mapped to [0, 1] *without* clamping, so tissue below the
window floor stays representable and the map is invertible. Clamping
happens only inside windowed losses and metrics.
"""

import numpy as np

from . import ops
from .geometry import MU_WATER, hu_to_mu, mu_to_hu
from .tensor import Tensor

# name -> (window level, window width), in HU
WINDOWS = {
    "full": (1000.0, 3000.0),
    "lung": (-600.0, 800.0),
    "soft": (50.0, 500.0),
}
WINDOW_NAMES = ("full", "lung", "soft")


def window_bounds(name):
    try:
        wl, ww = WINDOWS[name]
    except KeyError:
        raise ValueError(f"unknown window {name!r}, expected one of {WINDOW_NAMES}") from None
    return wl - 0.5 * ww, wl + 0.5 * ww


def normalize_mu(x):
    """Attenuation -> affine full-window units (unclamped)."""
    lo, hi = window_bounds("full")
    if isinstance(x, Tensor):
        scale = 1000.0 / (MU_WATER * (hi - lo))
        return ops.add(ops.mul(x, scale), -(lo + 1000.0) / (hi - lo))
    return (mu_to_hu(np.asarray(x)) - lo) / (hi - lo)


def denormalize_mu(x):
    lo, hi = window_bounds("full")
    if isinstance(x, Tensor):
        scale = MU_WATER * (hi - lo) / 1000.0
        return ops.add(ops.mul(x, scale), MU_WATER * (lo / 1000.0 + 1.0))
    return hu_to_mu(np.asarray(x) * (hi - lo) + lo)


def apply_window(x_norm, name):
    """Re-window affine full-window units into a clamped [0, 1] display window."""
    flo, fhi = window_bounds("full")
    lo, hi = window_bounds(name)
    a = (fhi - flo) / (hi - lo)
    b = (flo - lo) / (hi - lo)
    if isinstance(x_norm, Tensor):
        return ops.clamp(ops.add(ops.mul(x_norm, a), b), 0.0, 1.0)
    return np.clip(np.asarray(x_norm) * a + b, 0.0, 1.0)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], np.float32)


def sobel_edges(x):
    """Gradient-magnitude map of a (B, 1, H, W) tensor, reflect-padded."""
    wx = Tensor(_SOBEL_X.reshape(1, 1, 3, 3))
    wy = Tensor(_SOBEL_X.T.reshape(1, 1, 3, 3).copy())
    p = ops.pad_reflect(x, 1)
    gx = ops.conv2d(p, wx, None, padding=0)
    gy = ops.conv2d(p, wy, None, padding=0)
    return ops.sqrt(ops.add(ops.add(ops.mul(gx, gx), ops.mul(gy, gy)), 1e-12))


class FeatureExtractor:
    """Fixed random conv stack standing in for a pretrained perceptual net.

    Layout mirrors the first three conv stages of a small VGG-style
    prefix; taps sit after layer indices 2, 4 and 7. Weights are seeded
    and never trained, so the loss is a reproducible fixed metric.
    """

    TAPS = (2, 4, 7)

    def __init__(self, seed=0, width=16):
        rng = np.random.default_rng(seed)
        plan = [(3, width), (width, width), (width, 2 * width), (2 * width, 2 * width)]
        self.weights = []
        for cin, cout in plan:
            std = np.sqrt(2.0 / (cin * 9))
            w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
            b = np.zeros(cout, np.float32)
            self.weights.append((Tensor(w), Tensor(b)))

    def __call__(self, x):
        """Return the tap activations for a (B, 3, H, W) input."""
        convs = iter(self.weights)
        taps = {}
        h = x
        for idx in range(8):
            if idx in (0, 2, 5, 7):
                w, b = next(convs)
                h = ops.conv2d(h, w, b, padding=1)
            elif idx == 4:
                h = ops.maxpool2x2(h)
            else:
                h = ops.relu(h)
            if idx in self.TAPS:
                taps[idx] = h
        return [taps[i] for i in self.TAPS]


def window_stack(x_norm):
    """Stack the three clamped display windows into channels (B, 3, H, W)."""
    return ops.concat([apply_window(x_norm, n) for n in WINDOW_NAMES], axis=1)


def perceptual_loss(pred, target, extractor):
    fa = extractor(window_stack(pred))
    fb = extractor(window_stack(target))
    total = None
    for a, b in zip(fa, fb):
        term = ops.mse_loss(a, b)
        total = term if total is None else ops.add(total, term)
    return total


def restoration_loss(s_r, s_gt, x_s, x_gt):
    """Sinogram l1 plus smooth-l1 on the windowed reconstruction."""
    sino_term = ops.l1_loss(s_r, s_gt)
    img_term = ops.smooth_l1_loss(apply_window(x_s, "full"), apply_window(x_gt, "full"))
    return ops.add(sino_term, img_term)


def local_loss(x_u, x_gt):
    return ops.l1_loss(apply_window(x_u, "full"), apply_window(x_gt, "full"))


def refinement_loss(x_r, x_gt, extractor, perceptual_weight=0.1):
    """Multi-window l1 + multi-window edge l1 + weighted perceptual term."""
    total = None
    for name in WINDOW_NAMES:
        a = apply_window(x_r, name)
        b = apply_window(x_gt, name)
        term = ops.add(ops.l1_loss(a, b), ops.l1_loss(sobel_edges(a), sobel_edges(b)))
        total = term if total is None else ops.add(total, term)
    return ops.add(total, ops.mul(perceptual_loss(x_r, x_gt, extractor), perceptual_weight))


def total_loss(outputs, s_gt, x_gt_norm, extractor):
    """Equal-weight sum of the three stage losses.

    ``outputs`` carries tensors s_r, x_s, x_u, x_r in network units;
    ``x_gt_norm`` is the reference image in the same units.
    """
    l_s = restoration_loss(outputs["s_r"], s_gt, outputs["x_s"], x_gt_norm)
    l_u = local_loss(outputs["x_u"], x_gt_norm)
    l_r = refinement_loss(outputs["x_r"], x_gt_norm, extractor)
    return ops.add(ops.add(l_s, l_u), l_r), {
        "restoration": float(l_s.data),
        "local": float(l_u.data),
        "refinement": float(l_r.data),
    }
