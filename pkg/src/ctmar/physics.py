"""Polychromatic fan-beam simulation with metal implants.

The clean phantom X_gt is an energy-independent attenuation map (soft
tissue and bone vary slowly over the diagnostic range, so they are frozen
at their reference-energy values). A metal implant replaces the tissue in
its mask: the corrupted object is X_gt outside the mask and titanium, with
its strongly energy-dependent attenuation, inside. Per ray,

    I = sum_E eta(E) * exp(-[A + mu_Ti(E) * B]),    S_mc = -ln I

with A the tissue line integral and B the metal chord length (cm). eta is
the normalized source spectrum (20..120 keV, 1 keV bins); quantum noise
draws Poisson counts around N0 * I with a floor of one count before the
log. Rays that never cross metal have B = 0, so S_mc equals the clean
sinogram there up to float rounding (the trace-support property).

Dataset samples bundle (S_mc, trace, mask projection, S_gt, X_gt, mask)
plus a deterministic manifest; everything rewrites byte-identically for a
fixed seed.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import qnt
from .geometry import MU_WATER, FanBeamGeometry, preset
from .projector import forward_project

PHOTONS_PER_RAY = 2.0e7
REFERENCE_KEV = 70.0
TRACE_EPS = 1e-12


# -- source spectrum and materials -------------------------------------


@dataclass(frozen=True)
class Spectrum:
    energies: np.ndarray  # keV, f64
    weights: np.ndarray  # normalized to sum exactly 1 in f64
    photons: float = PHOTONS_PER_RAY


def make_spectrum(kvp=120.0, filtration=2.0):
    """Bremsstrahlung-shaped spectrum over 20..120 keV in 1 keV bins.

    Kramers ramp (kvp - E) with an aluminum-like low-energy filter term;
    the shape is generic but the moments are in the clinical ballpark.
    """
    energies = np.arange(20.0, 121.0)
    ramp = np.clip(kvp - energies, 0.0, None)
    filt = np.exp(-filtration * (30.0 / energies) ** 3)
    w = ramp * filt
    w = w / w.sum()
    # renormalize once more so the sum is 1 to the last ulp
    w = w / w.sum()
    return Spectrum(energies=energies, weights=w)


def _kn_factor(energies):
    # slowly decreasing Compton-like component, 1 at the reference energy
    return 1.0 - 0.0009 * (energies - REFERENCE_KEV)


def _mu_curve(energies, mu_ref, pe_fraction, pe_power=2.8):
    pe = (REFERENCE_KEV / energies) ** pe_power
    return mu_ref * (pe_fraction * pe + (1.0 - pe_fraction) * _kn_factor(energies))


def mu_water(energies):
    return _mu_curve(np.asarray(energies, np.float64), MU_WATER, 0.10)


def mu_bone(energies):
    return _mu_curve(np.asarray(energies, np.float64), 0.45, 0.35)


def mu_titanium(energies):
    """Strictly decreasing over the diagnostic range (drives beam hardening)."""
    return _mu_curve(np.asarray(energies, np.float64), 0.95, 0.55)


# -- phantoms -----------------------------------------------------------


def _grid(size):
    c = (size - 1) * 0.5
    y, x = np.mgrid[0:size, 0:size]
    return (x - c) / (size * 0.5), (y - c) / (size * 0.5)  # unit image circle


def _ellipse(xn, yn, cx, cy, ax, ay, ang):
    ca, sa = np.cos(ang), np.sin(ang)
    xr = (xn - cx) * ca + (yn - cy) * sa
    yr = -(xn - cx) * sa + (yn - cy) * ca
    return (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0


def make_phantom(size, kind="ellipses", seed=0):
    """Deterministic procedural phantom, values in [0, 3 mu_water] (1/cm).

    Kinds: ``disks`` (regions exact on pixel centers), ``ellipses``
    (tissue-contrast study), ``lung`` (air cavities plus a bony spine).
    Content stays within 90% of the image circle.
    """
    rng = np.random.default_rng(seed)
    xn, yn = _grid(size)
    img = np.zeros((size, size))
    if kind == "disks":
        body_r = 0.78 + 0.05 * rng.random()
        img[xn**2 + yn**2 <= body_r**2] = MU_WATER
        for _ in range(rng.integers(2, 5)):
            r = 0.08 + 0.22 * rng.random()
            cx, cy = (rng.random(2) * 2 - 1) * (body_r - r - 0.05)
            mu = MU_WATER * (0.85 + 0.5 * rng.random())
            img[(xn - cx) ** 2 + (yn - cy) ** 2 <= r**2] = mu
    elif kind == "ellipses":
        body = _ellipse(xn, yn, 0, 0, 0.82 + 0.04 * rng.random(), 0.68 + 0.06 * rng.random(), 0)
        img[body] = MU_WATER
        for _ in range(rng.integers(3, 6)):
            ax = 0.08 + 0.25 * rng.random()
            ay = 0.08 + 0.25 * rng.random()
            cx = (rng.random() * 2 - 1) * 0.5
            cy = (rng.random() * 2 - 1) * 0.4
            ang = rng.random() * np.pi
            mu = MU_WATER * (0.9 + 0.3 * rng.random())
            img[_ellipse(xn, yn, cx, cy, ax, ay, ang) & body] = mu
        if rng.random() < 0.7:  # cortical-like rim insert
            img[_ellipse(xn, yn, 0.0, -0.45, 0.16, 0.1, 0) & body] = 0.45
    elif kind == "lung":
        body = _ellipse(xn, yn, 0, 0, 0.85, 0.66, 0)
        img[body] = MU_WATER
        for sgn in (-1, 1):
            lung = _ellipse(
                xn, yn, sgn * (0.34 + 0.04 * rng.random()), -0.02, 0.24, 0.40, sgn * 0.12
            )
            img[lung & body] = 0.2 * MU_WATER
        img[_ellipse(xn, yn, 0, 0.5, 0.10, 0.09, 0) & body] = 0.45
        for _ in range(rng.integers(1, 3)):  # nodules
            cx = (rng.random() * 2 - 1) * 0.3
            cy = (rng.random() - 0.5) * 0.5
            img[_ellipse(xn, yn, cx, cy, 0.05, 0.05, 0) & body] = MU_WATER * (
                0.95 + 0.15 * rng.random()
            )
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return np.clip(img, 0.0, 3.0 * MU_WATER)


# -- metal shapes -------------------------------------------------------


def metal_library(size):
    """12 procedural implant masks centered at the origin, small to large.

    Pixel areas span ~3 px up to ~1.5% of the grid; the manifest bins them
    into 5 area quantile groups. Returns a list of boolean (size, size)
    arrays.
    """
    xn, yn = _grid(size)
    px = 2.0 / size  # one pixel in unit-circle coordinates

    def disk(r):
        return xn**2 + yn**2 <= r**2

    def bar(w, h, ang):
        ca, sa = np.cos(ang), np.sin(ang)
        xr = xn * ca + yn * sa
        yr = -xn * sa + yn * ca
        return (np.abs(xr) <= w) & (np.abs(yr) <= h)

    shapes = [
        disk(1.05 * px),
        bar(1.6 * px, 0.8 * px, 0.4),
        disk(1.55 * px),
        bar(2.6 * px, 0.75 * px, 1.1),
        disk(2.0 * px),
        bar(2.1 * px, 1.4 * px, 0.0),
        disk(2.6 * px) & ~disk(1.2 * px),  # ring
        bar(4.2 * px, 1.2 * px, 0.7),
        disk(3.2 * px),
        bar(3.2 * px, 2.2 * px, 0.3) | bar(1.1 * px, 4.2 * px, 0.3),
        disk(4.1 * px),
        disk(5.0 * px) | bar(5.6 * px, 1.4 * px, 1.2),
    ]
    return [s.copy() for s in shapes]


def area_bin(mask, size):
    """Quantile bin 0..4 of the metal area relative to the library span."""
    area = float(np.count_nonzero(mask))
    edges = np.array([6, 14, 30, 60]) * (size / 64.0) ** 2
    return int(np.searchsorted(edges, area, side="right"))


def place_metal(shape_mask, row, col):
    """Shift a centered library shape so its center lands on (row, col)."""
    size = shape_mask.shape[0]
    c = size // 2
    return np.roll(np.roll(shape_mask, row - c, axis=0), col - c, axis=1)


def sample_metal_mask(size, seed, body=None):
    """1-2 implants from the library placed inside the body region."""
    rng = np.random.default_rng(seed)
    lib = metal_library(size)
    if body is None:
        xn, yn = _grid(size)
        body = xn**2 + yn**2 <= 0.6**2
    rows, cols = np.nonzero(body)
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.integers(0, len(lib)))
        j = int(rng.integers(0, rows.size))
        mask |= place_metal(lib[k], int(rows[j]), int(cols[j]))
    mask &= body  # keep implants inside the patient
    if not mask.any():  # degenerate placement: drop a minimal pellet
        mask[rows[0], cols[0]] = True
    return mask


# -- corruption ---------------------------------------------------------


@dataclass
class MaterialImage:
    """Energy-independent tissue map plus a titanium mask."""

    tissue: np.ndarray  # 1/cm at the reference energy, zero under metal
    metal_mask: np.ndarray  # boolean


def implant_metal(x_gt, metal_mask):
    mask = np.asarray(metal_mask, bool)
    if mask.shape != x_gt.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {x_gt.shape}")
    return MaterialImage(tissue=np.where(mask, 0.0, x_gt), metal_mask=mask)


def polychromatic_project(material, spectrum, geom, noise=False, seed=None):
    """Corrupted sinogram S_mc (f64) via energy-resolved Beer-Lambert."""
    a = forward_project(material.tissue.astype(np.float64), geom)
    b = forward_project(material.metal_mask.astype(np.float64), geom)
    mu_e = mu_titanium(spectrum.energies)
    # (E, nd, nv) attenuation stack; desk scale keeps this small
    expo = np.exp(-(a[None, :, :] + mu_e[:, None, None] * b[None, :, :]))
    intensity = np.tensordot(spectrum.weights, expo, axes=1)
    if noise:
        rng = np.random.default_rng(seed)
        counts = rng.poisson(intensity * spectrum.photons).astype(np.float64)
        counts = np.maximum(counts, 1.0)  # count floor before the log
        intensity = counts / spectrum.photons
    return -np.log(intensity)


def compute_trace(metal_mask, geom, tau=TRACE_EPS):
    """Binary sinogram support of the metal: forward-projected chord > tau."""
    proj = forward_project(np.asarray(metal_mask, np.float64), geom)
    return (proj > tau).astype(np.float64)


def mask_projection(metal_mask, geom):
    """Continuous metal chord lengths (cm) in the sinogram domain."""
    return forward_project(np.asarray(metal_mask, np.float64), geom)


def dilate(mask, kernel):
    """Binary max-filter with a (kernel x kernel) window, zero padding.

    ``kernel`` 0 or 1 returns a copy; otherwise the kernel must be odd.
    Works on image masks and sinogram traces alike.
    """
    m = np.asarray(mask)
    if kernel in (0, 1):
        return m.copy()
    if kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd, got {kernel}")
    p = kernel // 2
    padded = np.pad(m, p, mode="constant")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
    return win.max(axis=(2, 3))


# -- datasets -----------------------------------------------------------

_KINDS = ("ellipses", "lung", "disks")


@dataclass
class Sample:
    index: int
    seed: int
    s_mc: np.ndarray
    s_gt: np.ndarray
    trace: np.ndarray
    mask_proj: np.ndarray
    x_gt: np.ndarray
    metal_mask: np.ndarray


def _sample_seed(seed, i):
    return int(seed) * 1000003 + i


def simulate_sample(geom, spectrum, seed, kind=None, noise=True):
    """One (clean, corrupted) pair for the given geometry."""
    rng_kind = kind or _KINDS[seed % len(_KINDS)]
    x_gt = make_phantom(geom.image_size, rng_kind, seed)
    body = x_gt > 0.5 * MU_WATER
    mask = sample_metal_mask(geom.image_size, seed + 1, body=body)
    material = implant_metal(x_gt, mask)
    s_mc = polychromatic_project(material, spectrum, geom, noise=noise, seed=seed + 2)
    s_gt = forward_project(x_gt.astype(np.float64), geom)
    return Sample(
        index=0,
        seed=seed,
        s_mc=s_mc,
        s_gt=s_gt,
        trace=compute_trace(mask, geom),
        mask_proj=mask_projection(mask, geom),
        x_gt=x_gt.astype(np.float64),
        metal_mask=mask.astype(np.float64),
    )


_GEOM_KEYS = (
    "image_size",
    "pixel_spacing",
    "num_views",
    "num_detectors",
    "detector_spacing",
    "source_distance",
    "detector_distance",
    "angular_range",
)


def write_geometry_file(path, geom):
    lines = ["[geometry]"]
    for k in _GEOM_KEYS:
        lines.append(f"{k} = {getattr(geom, k)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_geometry_file(path):
    vals = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith(("#", "[")):
                continue
            k, _, v = line.partition(" = ")
            if k not in _GEOM_KEYS:
                raise ValueError(f"unknown geometry key {k!r} in {path}")
            vals[k] = int(v) if k in ("image_size", "num_views", "num_detectors") else float(v)
    return FanBeamGeometry(**vals)


def make_dataset(out_dir, n, geom=None, seed=0, noise=True):
    """Simulate ``n`` samples into ``out_dir``; returns the Sample list.

    Layout: per-sample QNT1 files plus a line-oriented ``manifest.txt``
    (columns: index, per-sample seed, metal area bin) and ``geometry.cfg``.
    Deterministic: a rerun with the same seed writes identical bytes.
    """
    geom = geom or preset("desk")
    os.makedirs(out_dir, exist_ok=True)
    spectrum = make_spectrum()
    rows = []
    samples = []
    for i in range(n):
        s_seed = _sample_seed(seed, i)
        smp = simulate_sample(geom, spectrum, s_seed, kind=_KINDS[i % len(_KINDS)], noise=noise)
        smp.index = i
        stem = os.path.join(out_dir, f"s{i:04d}")
        qnt.save_tensor(stem + "_smc.qnt", smp.s_mc)
        qnt.save_tensor(stem + "_sgt.qnt", smp.s_gt)
        qnt.save_tensor(stem + "_trace.qnt", smp.trace)
        qnt.save_tensor(stem + "_maskproj.qnt", smp.mask_proj)
        qnt.save_tensor(stem + "_xgt.qnt", smp.x_gt)
        qnt.save_tensor(stem + "_mask.qnt", smp.metal_mask)
        rows.append(f"{i} {s_seed} {area_bin(smp.metal_mask, geom.image_size)}")
        samples.append(smp)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("# index seed area_bin\n")
        fh.write("\n".join(rows) + "\n")
    write_geometry_file(os.path.join(out_dir, "geometry.cfg"), geom)
    return samples


def load_dataset(path):
    """Read a dataset directory -> (samples, geometry)."""
    geom = read_geometry_file(os.path.join(path, "geometry.cfg"))
    samples = []
    with open(os.path.join(path, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, s_seed, _bin = line.split()
            stem = os.path.join(path, f"s{int(idx):04d}")
            samples.append(
                Sample(
                    index=int(idx),
                    seed=int(s_seed),
                    s_mc=qnt.load_tensor(stem + "_smc.qnt"),
                    s_gt=qnt.load_tensor(stem + "_sgt.qnt"),
                    trace=qnt.load_tensor(stem + "_trace.qnt"),
                    mask_proj=qnt.load_tensor(stem + "_maskproj.qnt"),
                    x_gt=qnt.load_tensor(stem + "_xgt.qnt"),
                    metal_mask=qnt.load_tensor(stem + "_mask.qnt"),
                )
            )
    return samples, geom
