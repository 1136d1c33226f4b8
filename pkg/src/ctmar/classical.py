"""Classical metal-artifact reduction baselines.

All three methods treat the metal trace as missing data and leave every
untraced sinogram bin bit-identical to the input:

  * linear interpolation (LI): per view, interpolate the traced run along
    the detector axis between its clean anchors;
  * normalized interpolation (NMAR-style): interpolate the sinogram
    normalized by a projected tissue prior, then denormalize;
  * frequency-split variant (FS): restore high-frequency detail near the
    implant by blending the corrupted image's high-pass band back into the
    normalized result under a Gaussian spatial weight.
"""

import warnings

import numpy as np

from .geometry import MU_WATER, mu_to_hu
from .projector import fbp, forward_project


def li_complete(sino, trace):
    """Per-view linear interpolation across traced detector runs.

    Bins with trace == 0 are returned bit-identical. A fully traced view
    is filled with the mean anchor value of the nearest clean views on
    both sides (with a warning), since it has no anchors of its own.
    """
    sino = np.asarray(sino)
    trace = np.asarray(trace)
    if sino.shape != trace.shape:
        raise ValueError(f"sinogram {sino.shape} vs trace {trace.shape}")
    nd, nv = sino.shape
    out = sino.copy()
    pos = np.arange(nd, dtype=np.float64)
    full_views = []
    anchors = trace == 0
    for v in range(nv):
        hole = ~anchors[:, v]
        if not hole.any():
            continue
        if hole.all():
            full_views.append(v)
            continue
        out[hole, v] = np.interp(pos[hole], pos[anchors[:, v]], sino[anchors[:, v], v])
    for v in full_views:
        vals = []
        for direction in (-1, 1):
            step = 1
            while step < nv:
                u = (v + direction * step) % nv
                if anchors[:, u].any():
                    vals.append(sino[anchors[:, u], u].mean())
                    break
                step += 1
        if not vals:
            raise ValueError("trace covers the whole sinogram: nothing to anchor on")
        warnings.warn(
            f"view {v} fully traced; filled with adjacent-view anchor mean",
            stacklevel=2,
        )
        out[:, v] = np.mean(vals)
    return out


def _mean3x3(img):
    p = np.pad(img, 1, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3))
    return win.mean(axis=(2, 3))


def nmar_prior_image(x_li, air_hu=-500.0, bone_hu=400.0):
    """Multi-threshold tissue prior: air -> 0, soft tissue -> water, bone kept.

    The thresholds are conventional defaults, not sourced values; both are
    overridable.
    """
    hu = mu_to_hu(x_li)
    prior = np.where(hu < air_hu, 0.0, np.where(hu <= bone_hu, MU_WATER, x_li))
    return _mean3x3(prior)


def nmar(sino, trace, geom, prior_sino=None, air_hu=-500.0, bone_hu=400.0):
    """Prior-normalized interpolation.

    The prior sinogram is floored at 1e-3 of its positive median before
    normalization so empty rays cannot blow up the quotient. Pass
    ``prior_sino`` to override the internally projected prior. A fully
    degenerate prior (no attenuating content at all) falls back to plain
    linear interpolation with a warning.
    """
    sino = np.asarray(sino)
    trace = np.asarray(trace)
    if prior_sino is None:
        x_li = fbp(li_complete(sino, trace), geom)
        prior_sino = forward_project(
            nmar_prior_image(x_li, air_hu=air_hu, bone_hu=bone_hu), geom
        )
    else:
        prior_sino = np.asarray(prior_sino, np.float64)
        if prior_sino.shape != sino.shape:
            raise ValueError(f"prior {prior_sino.shape} vs sinogram {sino.shape}")
    positive = prior_sino[prior_sino > 0]
    if not positive.size:
        warnings.warn("degenerate all-air prior; falling back to linear interpolation",
                      stacklevel=2)
        return li_complete(sino, trace)
    eps = 1e-3 * np.median(positive)
    denom = np.maximum(prior_sino, eps)
    normalized = sino / denom
    completed = li_complete(normalized, trace)
    out = sino.copy()
    hole = trace > 0
    out[hole] = (completed * denom)[hole]
    return out


def gaussian_kernel1d(size, sigma):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    x = np.arange(size, dtype=np.float64) - (size - 1) * 0.5
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, size, sigma):
    """Separable Gaussian with reflect padding, exact kernel footprint."""
    k = gaussian_kernel1d(size, sigma)
    p = size // 2
    out = np.asarray(img, np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(p, p) if a == axis else (0, 0) for a in (0, 1)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, size, axis=axis)
        out = win @ k
    return out


def fs_weight(metal_mask, image_size):
    """Gaussian-spread spatial weight of the implant, peak-normalized."""
    scale = image_size / 512.0
    size = int(round(99 * scale))
    size = max(size + (1 - size % 2), 3)  # odd, at least 3
    sigma = max(45 * scale, 0.5)
    w = gaussian_blur(np.asarray(metal_mask, np.float64), size, sigma)
    peak = w.max()
    return w / peak if peak > 0 else w


def fsnmar(x_nmar, x_mc, metal_mask):
    """Frequency-split blend of two reconstructions -> corrected image.

    Low-pass band comes from the normalized-interpolation image; the
    high-pass band is blended between the corrupted image (near metal,
    weight 1) and the normalized image (far away, weight 0). High-pass is
    unsharp masking with a 3-tap sigma-1 Gaussian.
    """
    x_nmar = np.asarray(x_nmar, np.float64)
    x_mc = np.asarray(x_mc, np.float64)
    if x_nmar.shape != x_mc.shape:
        raise ValueError(f"image shapes differ: {x_nmar.shape} vs {x_mc.shape}")
    w = fs_weight(metal_mask, x_nmar.shape[0])
    lp = lambda im: gaussian_blur(im, 3, 1.0)  # noqa: E731
    lp_nmar = lp(x_nmar)
    return lp_nmar + w * (x_mc - lp(x_mc)) + (1.0 - w) * (x_nmar - lp_nmar)


def fsnmar_from_sino(sino, trace, geom, metal_mask, nmar_sino=None):
    """Convenience wrapper running the full chain from the raw sinogram."""
    if nmar_sino is None:
        nmar_sino = nmar(sino, trace, geom)
    return fsnmar(fbp(nmar_sino, geom), fbp(np.asarray(sino), geom), metal_mask)
