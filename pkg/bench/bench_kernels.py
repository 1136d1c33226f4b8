"""Projector kernel benchmark: compiled loops vs the vectorized fallback.

The backend is fixed at import time by CTMAR_NO_NUMBA, so this script
re-executes itself in a subprocess per backend and prints a combined
table. Convolutions are not benchmarked here: they lower to BLAS matrix
products on both backends, so only the ray-driven kernels differ.

Usage: python bench/bench_kernels.py [--repeats 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def run_case(geom_name, repeats):
    import numpy as np

    from ctmar.backend import backend_name
    from ctmar.geometry import preset
    from ctmar.projector import adjoint_project, fbp, forward_project

    geom = preset(geom_name)
    rng = np.random.default_rng(0)
    img = rng.normal(0.2, 0.05, (geom.image_size, geom.image_size))
    sino = forward_project(img, geom)  # also warms up compilation

    rows = {}
    for name, fn, arg in (
        ("forward", forward_project, img),
        ("adjoint", adjoint_project, sino),
        ("fbp", fbp, sino),
    ):
        fn(arg, geom)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(arg, geom)
            times.append(time.perf_counter() - t0)
        rows[name] = min(times)
    return backend_name(), rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    parser.add_argument("--geometry", default="desk")
    args = parser.parse_args()

    if args.child:
        backend, rows = run_case(args.geometry, args.repeats)
        print(json.dumps({"backend": backend, "rows": rows}))
        return 0

    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, CTMAR_NO_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--child",
             "--repeats", str(args.repeats), "--geometry", args.geometry],
            env=env, capture_output=True, text=True, check=True,
        )
        payload = json.loads(out.stdout.strip().splitlines()[-1])
        results[payload["backend"]] = payload["rows"]

    print(f"geometry: {args.geometry} (best of {args.repeats})")
    print(f"{'kernel':<10} " + " ".join(f"{b:>12}" for b in results))
    for kernel in ("forward", "adjoint", "fbp"):
        cells = " ".join(f"{results[b][kernel] * 1e3:>10.2f}ms" for b in results)
        print(f"{kernel:<10} {cells}")
    backends = list(results)
    if len(backends) == 2:
        a, b = backends
        for kernel in ("forward", "adjoint", "fbp"):
            ratio = results[b][kernel] / results[a][kernel]
            print(f"{kernel}: {a} is {ratio:.1f}x vs {b}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
