"""Time the compiled and numpy pixel kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--res 256] [--repeat 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from phenofactor import kernels


def workloads(res: int, rng: np.random.Generator):
    image = rng.integers(0, 256, size=(res, res, 3), dtype=np.uint8)
    mask = rng.random((res, res)) < 0.4
    poly = np.array([[0.1, 0.2], [0.8, 0.1], [0.95, 0.7], [0.4, 0.95], [0.05, 0.6]]) * res
    theta = np.deg2rad(7.0)
    inv = np.array([[np.cos(theta), -np.sin(theta), 3.0], [np.sin(theta), np.cos(theta), -2.0]])
    img_f = image.astype(np.float64)
    return {
        "masked_color_sums": lambda k: k.masked_color_sums(image, mask),
        "fill_convex_polygon": lambda k: k.fill_convex_polygon(res, res, poly),
        "fill_ellipse": lambda k: k.fill_ellipse(res, res, res / 2, res / 2, res / 3, res / 4, 0.3),
        "warp_affine_bilinear": lambda k: k.warp_affine_bilinear(img_f, inv, res, res),
    }


def run(res: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    found = kernels.backends()
    results = {}
    for name, fn in workloads(res, rng).items():
        row = {}
        for backend, mod in found.items():
            fn(mod)  # warm-up
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
            row[backend] = t
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        results[name] = row
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the timings to this file")
    args = ap.parse_args(argv)
    results = run(args.res, args.repeat)
    print(f"active backend: {kernels.BACKEND}; image {args.res}x{args.res}; best of {args.repeat}")
    print(f"{'kernel':<22}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for name, row in results.items():
        cy = row.get("cython")
        print(f"{name:<22}{row['python'] * 1e3:>14.3f}"
              f"{(cy * 1e3 if cy else float('nan')):>14.3f}{row.get('speedup', float('nan')):>10.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"res": args.res, "repeat": args.repeat, "results": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
