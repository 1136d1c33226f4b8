"""Command line interface.

Every subcommand reads the same line-oriented config format (section
name = command name) and accepts the same keys as flags; explicit flags
win over the file, the file wins over defaults. Commands that create a
run directory write the merged config to ``config.lock`` plus a
``manifest.txt`` carrying the config hash, seed and package version, and
never a timestamp, so identical runs leave identical bytes behind.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__, qnt
from .classical import fsnmar_from_sino, li_complete, nmar
from .config import REQUIRED, ConfigError, coerce, config_hash, format_section, load_config
from .geometry import preset, preset_names
from .gradcheck import DEFAULT_TOL, run_registry
from .imageio import spectrum_image, write_pgm, write_window_pgm
from .losses import WINDOW_NAMES, normalize_mu
from .metrics import aggregate, window_metrics, write_metrics_csv
from .networks import Pipeline, conv_parity_mid, load_checkpoint, save_checkpoint
from .physics import load_dataset, make_dataset
from .projector import fbp
from .robustness import degradation_ratio, kernel_std, run_mask_sweep, run_trace_sweep
from .training import Adam, infer_pipeline, train_pipeline, train_sino_stage

SCHEMAS = {
    "simulate": {
        "out": (str, REQUIRED),
        "geometry": (str, "desk"),
        "n": (int, 8),
        "seed": (int, 0),
        "noise": (bool, True),
    },
    "train": {
        "data": (str, REQUIRED),
        "out": (str, REQUIRED),
        "geometry": (str, ""),
        "mode": (str, "completion"),
        "width": (int, 16),
        "steps": (int, 200),
        "lr": (float, 1e-3),
        "batch": (int, 2),
        "seed": (int, 0),
        "bottleneck": (str, "spectral"),
        "stage": (str, "all"),
        "save_every": (int, 0),
    },
    "infer": {
        "checkpoint": (str, REQUIRED),
        "data": (str, REQUIRED),
        "out": (str, REQUIRED),
        "paste_metal": (bool, False),
    },
    "eval": {
        "checkpoint": (str, REQUIRED),
        "data": (str, REQUIRED),
        "out": (str, ""),
    },
    "baseline": {
        "data": (str, REQUIRED),
        "out": (str, REQUIRED),
        "method": (str, "li"),
    },
    "robustness": {
        "checkpoint": (str, REQUIRED),
        "data": (str, REQUIRED),
        "out": (str, REQUIRED),
        "sweep": (str, "trace"),
        "kernels": (str, "0,3,5,7"),
    },
    "spectrum": {
        "input": (str, REQUIRED),
        "out": (str, REQUIRED),
    },
    "gradcheck": {
        "all": (bool, False),
        "names": (str, ""),
        "tol": (float, DEFAULT_TOL),
    },
}


def _merged_config(command, args):
    file_values = {}
    if args.config:
        parsed = load_config(args.config)
        for section in parsed:
            if section not in SCHEMAS:
                raise ConfigError(f"unknown section [{section}] in {args.config}")
            coerce(section, parsed[section], SCHEMAS[section])  # validate all sections
        file_values = parsed.get(command, {})
    merged = dict(file_values)
    for key in SCHEMAS[command]:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return coerce(command, merged, SCHEMAS[command])


def _make_run_dir(command, cfg, subdirs=()):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    for d in subdirs:
        os.makedirs(os.path.join(out, d), exist_ok=True)
    with open(os.path.join(out, "config.lock"), "w") as fh:
        fh.write(format_section(command, cfg))
    manifest = {
        "config_hash": config_hash(command, cfg),
        "seed": cfg.get("seed", ""),
        "version": __version__,
    }
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        for key in sorted(manifest):
            fh.write(f"{key} = {manifest[key]}\n")
    return out


def cmd_simulate(cfg):
    if cfg["geometry"] not in preset_names():
        raise ConfigError(f"unknown geometry {cfg['geometry']!r}, expected {preset_names()}")
    geom = preset(cfg["geometry"])
    samples = make_dataset(cfg["out"], cfg["n"], geom, seed=cfg["seed"], noise=cfg["noise"])
    print(f"simulated {len(samples)} samples into {cfg['out']}")
    return 0


def cmd_train(cfg):
    samples, geom = load_dataset(cfg["data"])
    if cfg["geometry"]:
        if cfg["geometry"] not in preset_names():
            raise ConfigError(f"unknown geometry {cfg['geometry']!r}, expected {preset_names()}")
        if preset(cfg["geometry"]) != geom:
            raise ConfigError(
                f"dataset geometry does not match requested preset {cfg['geometry']!r}"
            )
    mid = conv_parity_mid(cfg["width"]) if cfg["bottleneck"] == "conv_pair" else None
    pipe = Pipeline(
        geom,
        mode=cfg["mode"],
        width=cfg["width"],
        sino_bottleneck=cfg["bottleneck"],
        sino_mid=mid,
        seed=cfg["seed"],
    )
    out = _make_run_dir("train", cfg, subdirs=("checkpoints", "logs", "metrics", "images"))
    ck_dir = os.path.join(out, "checkpoints")

    def save_periodic(step, pipeline, history):
        if cfg["save_every"] and (step + 1) % cfg["save_every"] == 0:
            save_checkpoint(
                os.path.join(ck_dir, f"step{step + 1:06d}.qnt"), pipeline, step=step + 1
            )

    log = os.path.join(out, "logs", "train.csv")
    if cfg["stage"] == "sino":
        opt = Adam(pipe.sino_net.params(), lr=cfg["lr"])
        history = train_sino_stage(
            pipe.sino_net, pipe.mode, samples, geom,
            steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
            batch_size=cfg["batch"], log_path=log, opt=opt,
        )
    elif cfg["stage"] == "all":
        opt = Adam(pipe.params(), lr=cfg["lr"])
        history = train_pipeline(
            pipe, samples,
            steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
            batch_size=cfg["batch"], log_path=log, checkpoint_cb=save_periodic, opt=opt,
        )
    else:
        raise ConfigError(f"unknown stage {cfg['stage']!r}, expected all or sino")
    save_checkpoint(
        os.path.join(ck_dir, "final.qnt"), pipe, step=cfg["steps"], optimizer=opt,
        extra={"stage": cfg["stage"], "config_hash": config_hash("train", cfg)},
    )
    print(f"trained {cfg['steps']} steps, final loss {history[-1]['total']:.6f}")
    return 0


def _stage_images(pipe, samples):
    outs = infer_pipeline(pipe, samples)
    rows = []
    for s, o in zip(samples, outs):
        imgs = {
            "mc": normalize_mu(fbp(np.asarray(s.s_mc, np.float64), pipe.geom)),
            "u": o["x_u"],
            "s": o["x_s"],
            "r": o["x_r"],
        }
        rows.append((s, imgs))
    return rows


def cmd_infer(cfg):
    pipe, _ = load_checkpoint(cfg["checkpoint"])
    samples, _ = load_dataset(cfg["data"])
    os.makedirs(cfg["out"], exist_ok=True)
    from .losses import denormalize_mu
    from .networks import paste_metal

    for s, imgs in _stage_images(pipe, samples):
        base = os.path.join(cfg["out"], f"s{s.index:04d}")
        refined = imgs["r"]
        if cfg["paste_metal"]:
            refined = paste_metal(refined, imgs["mc"], s.metal_mask)
            imgs = dict(imgs, r=refined)
        for tag, img in imgs.items():
            write_window_pgm(f"{base}_{tag}.pgm", img, "full")
        write_window_pgm(f"{base}_gt.pgm", normalize_mu(s.x_gt), "full")
        qnt.save_tensor(f"{base}_r.qnt", denormalize_mu(refined).astype(np.float32))
    print(f"wrote {len(samples)} sample(s) to {cfg['out']}")
    return 0


def cmd_eval(cfg):
    """Long-format metrics for the refined output plus a metal-size summary."""
    from .physics import area_bin

    pipe, _ = load_checkpoint(cfg["checkpoint"])
    samples, geom = load_dataset(cfg["data"])
    rows = []
    per_bin = {}
    per_image = []
    for s, imgs in _stage_images(pipe, samples):
        gt = normalize_mu(s.x_gt)
        wm = window_metrics(imgs["r"], gt)
        per_image.append(wm)
        abin = area_bin(s.metal_mask, geom.image_size)
        per_bin.setdefault(abin, []).append(wm)
        for wname in WINDOW_NAMES:
            rows.append(
                {
                    "sample_id": s.index,
                    "metal_bin": abin,
                    "window": wname,
                    "rmse": wm[wname]["rmse"],
                    "psnr": wm[wname]["psnr"],
                    "ssim": wm[wname]["ssim"],
                }
            )
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        write_metrics_csv(
            os.path.join(cfg["out"], "metrics.csv"),
            rows,
            fieldnames=["sample_id", "metal_bin", "window", "rmse", "psnr", "ssim"],
        )
    for abin in sorted(per_bin):
        agg = aggregate(per_bin[abin])
        mp = np.mean([agg[w]["psnr"] for w in WINDOW_NAMES])
        ms = np.mean([agg[w]["ssim"] for w in WINDOW_NAMES])
        mr = np.mean([agg[w]["rmse"] for w in WINDOW_NAMES])
        print(f"metal bin {abin} (n={len(per_bin[abin])}): psnr {mp:.2f} ssim {ms:.4f} rmse {mr:.5f}")
    agg = aggregate(per_image)
    line = " ".join(
        f"{w}[psnr {agg[w]['psnr']:.2f} ssim {agg[w]['ssim']:.4f} rmse {agg[w]['rmse']:.5f}]"
        for w in WINDOW_NAMES
    )
    print(f"overall: {line}")
    return 0


def cmd_baseline(cfg):
    samples, geom = load_dataset(cfg["data"])
    method = cfg["method"]
    if method not in ("li", "nmar", "fsnmar"):
        raise ConfigError(f"unknown method {method!r}, expected li, nmar or fsnmar")
    os.makedirs(os.path.join(cfg["out"], "images"), exist_ok=True)
    rows = []
    mets = []
    for s in samples:
        if method == "li":
            x = fbp(li_complete(s.s_mc, s.trace), geom)
        elif method == "nmar":
            x = fbp(nmar(s.s_mc, s.trace, geom), geom)
        else:
            x = fsnmar_from_sino(s.s_mc, s.trace, geom, s.metal_mask)
        xn = normalize_mu(x)
        gt = normalize_mu(s.x_gt)
        wm = window_metrics(xn, gt)
        mets.append(wm)
        row = {"index": s.index, "method": method}
        for wname in WINDOW_NAMES:
            for metric, value in wm[wname].items():
                row[f"{wname}_{metric}"] = value
        rows.append(row)
        base = os.path.join(cfg["out"], "images", f"s{s.index:04d}")
        write_window_pgm(f"{base}_{method}.pgm", xn, "full")
        write_window_pgm(f"{base}_gt.pgm", gt, "full")
    write_metrics_csv(os.path.join(cfg["out"], "metrics.csv"), rows)
    agg = aggregate(mets)
    line = " ".join(
        f"{w}[psnr {agg[w]['psnr']:.2f} ssim {agg[w]['ssim']:.4f} rmse {agg[w]['rmse']:.5f}]"
        for w in WINDOW_NAMES
    )
    print(f"{method}: {line}")
    return 0


def cmd_robustness(cfg):
    pipe, _ = load_checkpoint(cfg["checkpoint"])
    samples, geom = load_dataset(cfg["data"])
    try:
        kernels = tuple(int(k) for k in cfg["kernels"].split(","))
    except ValueError:
        raise ConfigError(f"bad kernel list {cfg['kernels']!r}") from None
    os.makedirs(cfg["out"], exist_ok=True)
    if cfg["sweep"] == "trace":
        table = run_trace_sweep(pipe.sino_net, pipe.mode, samples, geom, kernels=kernels)
        fields = ["kernel", "image_rmse_mean", "image_rmse_std", "trace_rmse_mean", "trace_rmse_std"]
        write_metrics_csv(os.path.join(cfg["out"], "sweep.csv"), table, fieldnames=fields)
        for row in table:
            print(
                f"kernel {row['kernel']}: image_rmse {row['image_rmse_mean']:.5f}"
                f" +- {row['image_rmse_std']:.5f}"
                f" trace_rmse {row['trace_rmse_mean']:.5f} +- {row['trace_rmse_std']:.5f}"
            )
        if len(table) > 1:
            print(f"degradation ratio (image_rmse): {degradation_ratio(table):.3f}")
            print(
                f"degradation ratio (trace_rmse): "
                f"{degradation_ratio(table, column='trace_rmse_mean'):.3f}"
            )
            print(f"cross-kernel std (image_rmse): {kernel_std(table, 'image_rmse_mean'):.5f}")
    elif cfg["sweep"] == "mask":
        table = run_mask_sweep(pipe, samples, geom, kernels=kernels)
        fields = ["kernel", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"]
        write_metrics_csv(os.path.join(cfg["out"], "sweep.csv"), table, fieldnames=fields)
        for row in table:
            print(
                f"kernel {row['kernel']}: psnr {row['psnr_mean']:.2f} +- {row['psnr_std']:.2f}"
                f" ssim {row['ssim_mean']:.4f} +- {row['ssim_std']:.4f}"
            )
        if len(table) > 1:
            print(f"cross-kernel std (psnr): {kernel_std(table, 'psnr_mean'):.4f}")
    else:
        raise ConfigError(f"unknown sweep {cfg['sweep']!r}, expected trace or mask")
    return 0


def cmd_spectrum(cfg):
    arr = qnt.load_tensor(cfg["input"])
    if arr.ndim != 2:
        raise ConfigError(f"spectrum wants a 2-d tensor, got shape {arr.shape}")
    out_dir = os.path.dirname(cfg["out"])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    write_pgm(cfg["out"], spectrum_image(arr))
    print(f"wrote spectrum image {cfg['out']}")
    return 0


def cmd_gradcheck(cfg):
    names = [n for n in cfg["names"].split(",") if n] or None
    if cfg["all"]:
        names = None
    results = run_registry(names)
    failed = False
    for name, err in results.items():
        ok = err < cfg["tol"]
        failed |= not ok
        print(f"{name}: {err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "robustness": cmd_robustness,
    "spectrum": cmd_spectrum,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctmar", description="Fan-beam CT metal artifact reduction toolkit"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="optional key = value config file")
        for key, (typ, default) in schema.items():
            required = default is REQUIRED
            helptext = "required" if required else f"default: {default}"
            p.add_argument(f"--{key}", default=None, type=str, help=helptext)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _merged_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, AssertionError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
