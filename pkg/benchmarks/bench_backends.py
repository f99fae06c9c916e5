"""Compare the compiled and numpy kernel backends on the bundled scene.

    python benchmarks/bench_backends.py --rays 200000 --samples 64
"""

import argparse
import time

import numpy as np

from gshadow import kernels
from gshadow.bench import bench_rays
from gshadow.body import posed_set
from gshadow.scene import load_scene


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return time.perf_counter() - t0, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rays", type=int, default=200_000)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    scene = load_scene()
    gset = posed_set(scene.body, scene.skeleton, scene.poses[0])
    origins, dirs = bench_rays(gset, args.rays, seed=0)
    print(f"{len(gset)} gaussians, {args.rays} rays, backends: {', '.join(sorted(kernels.BACKENDS))}")
    print(f"{'backend':>8}  {'kernel':>10}  {'seconds':>8}  {'Mrays/s':>8}  {'max |diff|':>10}")
    ref = {}
    for name in sorted(kernels.BACKENDS):
        runs = {
            "analytic": lambda: kernels.transmittance_batch(
                gset, origins, dirs, n_threads=args.threads, backend=name),
            f"sampled-{args.samples}": lambda: kernels.sampled_transmittance_batch(
                gset, origins, dirs, args.samples, n_threads=args.threads, backend=name),
        }
        for kernel, fn in runs.items():
            dt, out = timed(fn)
            diff = float(np.max(np.abs(out - ref[kernel]))) if kernel in ref else 0.0
            ref.setdefault(kernel, out)
            print(f"{name:>8}  {kernel:>10}  {dt:8.3f}  {args.rays / dt / 1e6:8.3f}  {diff:10.2e}")


if __name__ == "__main__":
    main()
