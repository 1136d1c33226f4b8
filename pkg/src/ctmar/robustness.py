"""Segmentation-sensitivity protocol: dilation sweeps and augmentation.

All perturbations start from the image-domain metal mask: dilate it with
a k x k box, then recompute the trace and the mask projection through the
projector, so both derived inputs stay mutually consistent. Sweeps report
two error columns per kernel: mean windowed image RMSE against the clean
reference, and sinogram RMSE over the original (undilated) trace region,
where the actual corruption lives.
"""

import numpy as np

from .losses import normalize_mu
from .metrics import mean_window_rmse
from .networks import replace_and_recon, sino_input
from .physics import compute_trace, dilate, mask_projection
from .tensor import Tensor, no_grad

SWEEP_KERNELS = (0, 3, 5, 7)


def _finite_mean(values):
    """Average of the finite entries, infinity if there are none.

    A window that matches the reference exactly has no finite PSNR, so a
    sample's score comes from its remaining windows; dropping saturated
    windows instead of averaging infinities keeps the sweep's mean and
    std columns usable.
    """
    arr = np.asarray(values, dtype=np.float64)
    keep = np.isfinite(arr)
    if not keep.any():
        return float("inf")
    return float(arr[keep].mean())


def perturbed_views(sample, geom, kernel):
    """Dilated mask plus its re-projected trace and mask projection."""
    mask = np.asarray(sample.metal_mask)
    if kernel:
        mask = dilate(mask, kernel)
    return mask, compute_trace(mask, geom), mask_projection(mask, geom)


def eval_sino_net(net, mode, samples, geom, kernel=0):
    """Run a trained sinogram net with kernel-dilated segmentation inputs.

    Returns per-sample dicts with the two error columns. The splice uses
    the dilated trace (the net's belief about where metal is), while the
    sinogram RMSE is always measured over the original trace so numbers
    stay comparable across kernels.
    """
    rows = []
    for s in samples:
        _, trace_k, proj_k = perturbed_views(s, geom, kernel)
        x_in = sino_input(s.s_mc, trace_k, proj_k, mode).astype(np.float32)[None]
        with no_grad():
            s_r = net(Tensor(x_in), training=False)
            x_s, spliced = replace_and_recon(
                s_r, np.asarray(s.s_mc, np.float32)[None, None], trace_k[None, None], geom
            )
        orig = np.asarray(s.trace) > 0
        sino_err = float(
            np.sqrt(np.mean((spliced.data[0, 0][orig] - s.s_gt[orig]) ** 2))
        )
        img_err = mean_window_rmse(x_s.data[0, 0], normalize_mu(s.x_gt))
        rows.append({"kernel": kernel, "image_rmse": img_err, "trace_rmse": sino_err})
    return rows


def run_trace_sweep(net, mode, samples, geom, kernels=SWEEP_KERNELS):
    """Mean and spread of both error columns for each dilation kernel.

    Nesting of the perturbed traces is verified on every sample before
    anything is evaluated.
    """
    verify_nesting(samples, geom, kernels)
    table = []
    for k in kernels:
        rows = eval_sino_net(net, mode, samples, geom, kernel=k)
        img = np.array([r["image_rmse"] for r in rows])
        sino = np.array([r["trace_rmse"] for r in rows])
        table.append(
            {
                "kernel": k,
                "image_rmse_mean": float(img.mean()),
                "image_rmse_std": float(img.std()),
                "trace_rmse_mean": float(sino.mean()),
                "trace_rmse_std": float(sino.std()),
            }
        )
    return table


def run_mask_sweep(pipeline, samples, geom, kernels=SWEEP_KERNELS):
    """Full-pipeline quality per dilation kernel (three-window averages).

    Each row carries mean and std over samples of the refined output's
    mean-window PSNR and SSIM, with the perturbed segmentation driving
    both the sinogram-net input and the splice.
    """
    from .metrics import ssim as ssim_metric
    from .metrics import window_metrics
    from .losses import WINDOW_NAMES
    from .training import prepare_batch, prepare_sample

    verify_nesting(samples, geom, kernels)
    table = []
    for k in kernels:
        psnrs, ssims = [], []
        for s in samples:
            mask_k, trace_k, proj_k = perturbed_views(s, geom, k)
            perturbed = type(s)(
                index=s.index, seed=s.seed, s_mc=s.s_mc, s_gt=s.s_gt,
                trace=trace_k, mask_proj=proj_k, x_gt=s.x_gt, metal_mask=mask_k,
            )
            batch = prepare_batch([prepare_sample(perturbed, geom, pipeline.mode)], [0])
            with no_grad():
                outs = pipeline.forward(batch, training=False)
            wm = window_metrics(outs["x_r"].data[0, 0], normalize_mu(s.x_gt))
            psnrs.append(_finite_mean([wm[w]["psnr"] for w in WINDOW_NAMES]))
            ssims.append(np.mean([wm[w]["ssim"] for w in WINDOW_NAMES]))
        table.append(
            {
                "kernel": k,
                "psnr_mean": float(np.mean(psnrs)),
                "psnr_std": float(np.std(psnrs)),
                "ssim_mean": float(np.mean(ssims)),
                "ssim_std": float(np.std(ssims)),
            }
        )
    return table


def verify_nesting(samples, geom, kernels=SWEEP_KERNELS):
    """Check Trace_k1 subset Trace_k2 for k1 < k2 on every sample."""
    ks = sorted(kernels)
    for s in samples:
        prev = None
        for k in ks:
            _, trace_k, _ = perturbed_views(s, geom, k)
            cur = trace_k > 0
            if prev is not None and not (cur | prev == cur).all():
                raise AssertionError(f"trace nesting violated at kernel {k} (sample {s.index})")
            prev = cur


def kernel_std(table, column):
    """Population std of a column across the sweep's kernel rows."""
    return float(np.std([row[column] for row in table]))


def degradation_ratio(table, column="image_rmse_mean"):
    """Largest-kernel error over baseline error from a sweep table."""
    base = table[0][column]
    worst = table[-1][column]
    if base <= 0:
        raise ValueError("degenerate sweep baseline")
    return worst / base


def pick_kernels(n, kernels=SWEEP_KERNELS, seed=0):
    """Uniform per-sample kernel choices used by the augmentation."""
    rng = np.random.default_rng(seed)
    return [kernels[i] for i in rng.integers(0, len(kernels), size=n)]


def augment_with_dilation(samples, geom, kernels=SWEEP_KERNELS, seed=0):
    """Training-time augmentation: per-sample random segmentation dilation.

    Ground-truth tensors are untouched; only the mask-derived inputs move,
    teaching the net not to trust exact segmentation boundaries.
    """
    picks = pick_kernels(len(samples), kernels, seed)
    out = []
    for s, k in zip(samples, picks):
        mask, trace_k, proj_k = perturbed_views(s, geom, k)
        out.append(
            type(s)(
                index=s.index,
                seed=s.seed,
                s_mc=s.s_mc,
                s_gt=s.s_gt,
                trace=trace_k,
                mask_proj=proj_k,
                x_gt=s.x_gt,
                metal_mask=mask,
            )
        )
    return out
