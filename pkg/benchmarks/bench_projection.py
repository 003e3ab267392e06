#!/usr/bin/env python3
"""Benchmark the compiled projection kernels against the NumPy fallback.

Times one forward projection + one filtered back projection round trip per
backend across grid sizes, and verifies the two backends agree.  Run after
building the extension in place:

    python setup.py build_ext --inplace
    python benchmarks/bench_projection.py --sizes 64 128 256
"""

import argparse
import json
import time

import numpy as np

from kv2mv import projops
from kv2mv.phantomgen import uniform_angles


def make_phantom(d):
    yy, xx = np.mgrid[0:d, 0:d]
    c = (d - 1) / 2
    img = np.where((yy - c) ** 2 + (xx - c) ** 2 <= (0.4 * d) ** 2, 40.0, -1000.0)
    img[(yy - c - d * 0.1) ** 2 + (xx - c) ** 2 <= (0.05 * d) ** 2] = 1200.0
    return img


def timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--json", help="optionally dump results to a JSON file")
    args = parser.parse_args()

    if projops.BACKEND != "cython":
        print("compiled kernels not available; only the numpy fallback will run")

    rows = []
    print(f"{'size':>6} {'angles':>7} {'backend':>8} {'forward':>10} {'fbp':>10} {'speedup':>8}")
    for d in args.sizes:
        n_angles = 3 * d
        img = make_phantom(d)
        angles = uniform_angles(n_angles)
        n_det = projops.detector_count(d)

        results = {}
        backends = [("numpy", projops.splat_project_numpy, projops.backproject_numpy)]
        if projops.BACKEND == "cython":
            from kv2mv import _projkern

            backends.append(
                (
                    "cython",
                    lambda im, an, nd: _projkern.splat_project(
                        np.ascontiguousarray(im), np.ascontiguousarray(an), nd
                    ),
                    lambda pr, an, sz: _projkern.backproject(
                        np.ascontiguousarray(pr), np.ascontiguousarray(an), sz
                    ),
                )
            )

        for name, project, backproject in backends:
            fp = min(timed(lambda: project(img, angles, n_det)) for _ in range(args.repeats))
            sino = project(img, angles, n_det)
            bp = min(
                timed(lambda: backproject(sino, angles, d)) for _ in range(args.repeats)
            )
            results[name] = {"forward_s": fp, "backproject_s": bp, "sino": sino}

        if len(results) == 2:
            agree = np.allclose(
                results["numpy"]["sino"], results["cython"]["sino"], rtol=1e-10, atol=1e-10
            )
            if not agree:
                raise SystemExit("backend outputs disagree; refusing to report timings")

        base = results["numpy"]["forward_s"] + results["numpy"]["backproject_s"]
        for name, res in results.items():
            total = res["forward_s"] + res["backproject_s"]
            print(
                f"{d:>6} {n_angles:>7} {name:>8} {res['forward_s'] * 1e3:>9.1f}ms "
                f"{res['backproject_s'] * 1e3:>9.1f}ms {base / total:>7.1f}x"
            )
            rows.append(
                {
                    "size": d,
                    "n_angles": n_angles,
                    "backend": name,
                    "forward_s": res["forward_s"],
                    "backproject_s": res["backproject_s"],
                }
            )

    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
        print(f"wrote {args.json}")


if __name__ == "__main__":
    main()
