"""Losses and metrics: hand values, independent oracles, invariances."""

import math
import warnings

import numpy as np
import pytest

from ctmar import ops
from ctmar.classical import gaussian_kernel1d
from ctmar.gradcheck import grad_check
from ctmar.geometry import MU_WATER, hu_to_mu
from ctmar.losses import (
    WINDOW_NAMES,
    WINDOWS,
    FeatureExtractor,
    apply_window,
    denormalize_mu,
    local_loss,
    normalize_mu,
    perceptual_loss,
    refinement_loss,
    restoration_loss,
    sobel_edges,
    total_loss,
    window_bounds,
    window_stack,
)
from ctmar.metrics import (
    aggregate,
    mean_window_rmse,
    psnr,
    rmse,
    ssim,
    window_metrics,
    write_metrics_csv,
)
from ctmar.tensor import Tensor


def brute_force_ssim(a, b, peak=1.0, kernel_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed-statistics SSIM oracle: explicit per-pixel neighborhoods."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    k1d = gaussian_kernel1d(kernel_size, sigma)
    w = np.outer(k1d, k1d)
    p = kernel_size // 2
    pa = np.pad(a, p, mode="reflect")
    pb = np.pad(b, p, mode="reflect")
    wa = np.lib.stride_tricks.sliding_window_view(pa, (kernel_size, kernel_size))
    wb = np.lib.stride_tricks.sliding_window_view(pb, (kernel_size, kernel_size))
    mu_a = np.tensordot(wa, w, axes=((2, 3), (0, 1)))
    mu_b = np.tensordot(wb, w, axes=((2, 3), (0, 1)))
    ea = np.tensordot(wa * wa, w, axes=((2, 3), (0, 1)))
    eb = np.tensordot(wb * wb, w, axes=((2, 3), (0, 1)))
    eab = np.tensordot(wa * wb, w, axes=((2, 3), (0, 1)))
    var_a, var_b, cov = ea - mu_a**2, eb - mu_b**2, eab - mu_a * mu_b
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


# -- windows and normalization ---------------------------------------


def test_window_table_values():
    assert WINDOWS["full"] == (1000.0, 3000.0)
    assert WINDOWS["lung"] == (-600.0, 800.0)
    assert WINDOWS["soft"] == (50.0, 500.0)


def test_window_center_maps_to_half():
    for name in WINDOW_NAMES:
        wl, _ = WINDOWS[name]
        x = normalize_mu(hu_to_mu(wl))
        assert np.isclose(apply_window(x, name), 0.5, atol=1e-9)


def test_window_clamps_at_bounds():
    lo, hi = window_bounds("soft")
    below = normalize_mu(hu_to_mu(lo - 123.0))
    above = normalize_mu(hu_to_mu(hi + 1.0))
    assert apply_window(below, "soft") == 0.0
    assert apply_window(above, "soft") == 1.0
    # 300 HU sits exactly at the soft-window top: (300 - (-200)) / 500 = 1
    assert np.isclose(apply_window(normalize_mu(hu_to_mu(300.0)), "soft"), 1.0)


def test_normalize_is_affine_and_invertible_out_of_window():
    mu = hu_to_mu(np.array([-800.0, 0.0, 2600.0]))  # lung content below window
    x = normalize_mu(mu)
    assert x[0] < 0.0  # representable, not clamped
    assert np.allclose(denormalize_mu(x), mu, atol=1e-12)


def test_normalize_tensor_matches_numpy():
    mu = np.abs(np.random.default_rng(0).standard_normal((2, 1, 4, 4))) * MU_WATER
    a = normalize_mu(Tensor(mu.astype(np.float32)))
    b = normalize_mu(mu)
    assert np.allclose(a.data, b, atol=1e-6)
    back = denormalize_mu(a)
    assert np.allclose(back.data, mu, atol=1e-6)


def test_unknown_window_raises():
    with pytest.raises(ValueError):
        window_bounds("bone")


# -- sobel -------------------------------------------------------------


def test_sobel_constant_image_is_zero():
    x = Tensor(np.full((1, 1, 8, 8), 3.0))
    assert np.allclose(sobel_edges(x).data, 1e-6, atol=1e-5)


def test_sobel_vertical_step_peak_response():
    h = 0.7
    img = np.zeros((1, 1, 8, 8), np.float64)
    img[:, :, :, 4:] = h
    mag = sobel_edges(Tensor(img)).data[0, 0]
    # |gx| on the step column is 4h with +-1/+-2 taps; gy cancels there
    assert np.isclose(mag.max(), 4.0 * h, rtol=1e-6)
    assert np.isclose(mag[4, 4], 4.0 * h, rtol=1e-6)


def test_sobel_rotation_swaps_axes():
    rng = np.random.default_rng(1)
    img = rng.random((6, 6))
    a = sobel_edges(Tensor(img[None, None]))
    b = sobel_edges(Tensor(np.rot90(img).copy()[None, None]))
    assert np.allclose(np.rot90(a.data[0, 0]), b.data[0, 0], atol=1e-6)


# -- losses ------------------------------------------------------------


def test_restoration_loss_unit_offset_example():
    rng = np.random.default_rng(2)
    s_gt = Tensor(rng.random((1, 1, 8, 8)))
    s_r = ops.add(s_gt, 1.0)
    x_gt = Tensor(rng.random((1, 1, 8, 8)))
    loss = restoration_loss(s_r, s_gt, x_gt, x_gt)
    assert np.isclose(loss.item(), 1.0, atol=1e-7)


def test_losses_zero_at_perfect_prediction():
    rng = np.random.default_rng(3)
    x = Tensor(rng.random((1, 1, 8, 8)))
    s = Tensor(rng.random((1, 1, 8, 8)))
    fe = FeatureExtractor(seed=0, width=8)
    assert restoration_loss(s, s, x, x).item() == 0.0
    assert local_loss(x, x).item() == 0.0
    assert refinement_loss(x, x, fe).item() == 0.0
    assert perceptual_loss(x, x, fe).item() == 0.0


def test_local_loss_constant_offset():
    x = Tensor(np.full((1, 1, 4, 4), 0.4))
    y = Tensor(np.full((1, 1, 4, 4), 0.3))
    assert np.isclose(local_loss(x, y).item(), 0.1, atol=1e-7)


def test_total_loss_matches_sum_of_parts():
    rng = np.random.default_rng(4)
    fe = FeatureExtractor(seed=0, width=8)
    outputs = {
        "s_r": Tensor(rng.random((1, 1, 8, 8))),
        "x_s": Tensor(rng.random((1, 1, 8, 8))),
        "x_u": Tensor(rng.random((1, 1, 8, 8))),
        "x_r": Tensor(rng.random((1, 1, 8, 8))),
    }
    s_gt = Tensor(rng.random((1, 1, 8, 8)))
    x_gt = Tensor(rng.random((1, 1, 8, 8)))
    loss, parts = total_loss(outputs, s_gt, x_gt, fe)
    want = (
        restoration_loss(outputs["s_r"], s_gt, outputs["x_s"], x_gt).item()
        + local_loss(outputs["x_u"], x_gt).item()
        + refinement_loss(outputs["x_r"], x_gt, fe).item()
    )
    assert np.isclose(loss.item(), want, atol=1e-7)
    assert set(parts) == {"restoration", "local", "refinement"}
    assert np.isclose(sum(parts.values()), loss.item(), atol=1e-6)


def test_feature_extractor_deterministic_and_fixed():
    a = FeatureExtractor(seed=5, width=8)
    b = FeatureExtractor(seed=5, width=8)
    c = FeatureExtractor(seed=6, width=8)
    for (wa, _), (wb, _) in zip(a.weights, b.weights):
        assert np.array_equal(wa.data, wb.data)
    assert not np.array_equal(a.weights[0][0].data, c.weights[0][0].data)
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
    taps = a(x)
    assert len(taps) == 3
    assert taps[1].shape[2] == 8  # the tap after pooling is at half resolution


def test_window_stack_shape_and_order():
    x = Tensor(np.random.default_rng(1).random((2, 1, 8, 8)).astype(np.float32))
    st = window_stack(x)
    assert st.shape == (2, 3, 8, 8)
    for i, name in enumerate(WINDOW_NAMES):
        assert np.allclose(st.data[:, i : i + 1], apply_window(x, name).data, atol=1e-7)


def test_refinement_loss_gradcheck_loose():
    rng = np.random.default_rng(5)
    fe = FeatureExtractor(seed=0, width=8)
    edges = (0.0, 1.0, -1.0 / 6.0, 0.1, 8.0 / 30.0)

    def away(arr):
        for c in edges:
            arr[np.abs(arr - c) < 0.01] += 0.02
        return arr

    x_r = Tensor(away(rng.random((1, 1, 8, 8))).astype(np.float64))
    x_gt = Tensor(away(rng.random((1, 1, 8, 8))).astype(np.float64))
    x_r.data[np.abs(x_r.data - x_gt.data) < 0.02] += 0.05
    x_r.data = away(x_r.data)
    assert grad_check(lambda a, b: refinement_loss(a, b, fe), [x_r, x_gt]) < 1e-3


# -- metrics -----------------------------------------------------------


def test_rmse_psnr_hand_values():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)
    assert np.isclose(rmse(a, b), 0.1)
    assert np.isclose(psnr(a, b), 20.0)
    assert psnr(a, a) == math.inf
    assert rmse(a, a) == 0.0


def test_metric_symmetry():
    rng = np.random.default_rng(6)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert rmse(a, b) == rmse(b, a)
    assert np.isclose(ssim(a, b), ssim(b, a), atol=1e-12)


def test_ssim_identical_is_one():
    x = np.random.default_rng(7).random((24, 24))
    assert np.isclose(ssim(x, x), 1.0, atol=1e-9)


def test_ssim_matches_brute_force_oracle():
    rng = np.random.default_rng(8)
    for _ in range(5):
        a = rng.random((20, 22))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0.0, 1.0)
        assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-6


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(9)
    a = rng.random((32, 32))
    s1 = ssim(a, np.clip(a + 0.02 * rng.standard_normal(a.shape), 0, 1))
    s2 = ssim(a, np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1))
    assert s1 > s2


def test_mean_window_rmse_is_arithmetic_mean():
    rng = np.random.default_rng(10)
    pred = rng.random((16, 16))
    gt = rng.random((16, 16))
    wm = window_metrics(pred, gt)
    want = np.mean([wm[n]["rmse"] for n in WINDOW_NAMES])
    assert abs(mean_window_rmse(pred, gt) - want) < 1e-9


def test_aggregate_excludes_inf_psnr_with_warning():
    rng = np.random.default_rng(11)
    x = rng.random((16, 16))
    y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
    per = [window_metrics(x, y), window_metrics(x, x)]  # second pair is exact
    with pytest.warns(UserWarning, match="infinite PSNR"):
        agg = aggregate(per)
    for name in WINDOW_NAMES:
        assert math.isfinite(agg[name]["psnr"])
        # inf was excluded, so the average equals the finite entry alone
        assert np.isclose(agg[name]["psnr"], per[0][name]["psnr"])
        assert np.isclose(agg[name]["ssim"], (per[0][name]["ssim"] + 1.0) / 2.0)


def test_write_metrics_csv_roundtrip(tmp_path):
    import csv

    rows = [
        {"sample_id": 0, "window": "full", "rmse": 0.125, "psnr": 18.06, "ssim": 0.9},
        {"sample_id": 1, "window": "soft", "rmse": 0.5, "psnr": 6.02, "ssim": 0.5},
    ]
    p = tmp_path / "m.csv"
    write_metrics_csv(p, rows, fieldnames=["sample_id", "window", "rmse", "psnr", "ssim"])
    with open(p) as fh:
        back = list(csv.DictReader(fh))
    assert back[0]["window"] == "full"
    assert float(back[1]["rmse"]) == 0.5
    with pytest.raises(ValueError):
        write_metrics_csv(tmp_path / "empty.csv", [])
