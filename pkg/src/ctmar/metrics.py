"""Image quality metrics on clamped display windows.

PSNR uses peak 1.0 (windowed images live in [0, 1]). Identical inputs
produce an infinite PSNR; averaging helpers skip those entries and warn
instead of propagating inf.
"""

import csv
import math
import warnings

import numpy as np

from .classical import gaussian_kernel1d
from .losses import WINDOW_NAMES, apply_window


def rmse(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak=1.0):
    err = rmse(a, b)
    if err == 0.0:
        return math.inf
    return float(20.0 * np.log10(peak / err))


def _blur2d(img, k):
    for axis in (0, 1):
        p = k.size // 2
        padded = np.pad(img, [(p, p) if a == axis else (0, 0) for a in (0, 1)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, k.size, axis=axis)
        img = win @ k
    return img


def ssim(a, b, peak=1.0, kernel_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with a Gaussian window, reflect padding."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need equal 2-d images, got {a.shape} vs {b.shape}")
    k = gaussian_kernel1d(kernel_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _blur2d(a, k)
    mu_b = _blur2d(b, k)
    var_a = _blur2d(a * a, k) - mu_a**2
    var_b = _blur2d(b * b, k) - mu_b**2
    cov = _blur2d(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def window_metrics(pred_norm, gt_norm):
    """Per-window psnr/ssim/rmse dict for one image pair in network units."""
    out = {}
    for name in WINDOW_NAMES:
        a = apply_window(np.asarray(pred_norm), name)
        b = apply_window(np.asarray(gt_norm), name)
        out[name] = {"psnr": psnr(a, b), "ssim": ssim(a, b), "rmse": rmse(a, b)}
    return out


def mean_window_rmse(pred_norm, gt_norm):
    """Arithmetic mean of the three windowed RMSE values."""
    m = window_metrics(pred_norm, gt_norm)
    return sum(m[n]["rmse"] for n in WINDOW_NAMES) / len(WINDOW_NAMES)


def aggregate(per_image):
    """Average a list of window_metrics dicts; finite PSNRs only.

    Entries with infinite PSNR are excluded from the PSNR average with a
    warning. SSIM and RMSE always average over everything.
    """
    out = {}
    for name in WINDOW_NAMES:
        stats = {}
        for key in ("psnr", "ssim", "rmse"):
            vals = [m[name][key] for m in per_image]
            if key == "psnr":
                finite = [v for v in vals if math.isfinite(v)]
                if len(finite) < len(vals):
                    warnings.warn(
                        f"{len(vals) - len(finite)} infinite PSNR value(s) "
                        f"excluded from the {name} average",
                        stacklevel=2,
                    )
                vals = finite or [math.inf]
            stats[key] = float(np.mean(vals))
        out[name] = stats
    return out


def write_metrics_csv(path, rows, fieldnames=None):
    """Write a list of flat dicts; keys are sorted for determinism."""
    if not rows:
        raise ValueError("no rows to write")
    if fieldnames is None:
        fieldnames = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k)) for k in fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v
