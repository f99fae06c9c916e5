"""Timing the analytic shadow kernel against stratified sampling."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .gaussian_core import GaussianSet

CSV_HEADER = ("method", "gaussians", "rays", "seconds", "mean_abs_delta")


@dataclass(frozen=True)
class BenchRow:
    method: str
    gaussians: int
    rays: int
    seconds: float
    mean_abs_delta: float


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def row(self, method: str) -> BenchRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def speedup(self, method: str) -> float:
        """How many times slower ``method`` ran than the analytic kernel."""
        return self.row(method).seconds / self.row("analytic").seconds

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.method, r.gaussians, r.rays, f"{r.seconds:.6f}", f"{r.mean_abs_delta:.6e}"])
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("method", "gaussians", "rays", "seconds", "mean |dT|", "x analytic")
        body = [(r.method, str(r.gaussians), str(r.rays), f"{r.seconds:.3f}",
                 f"{r.mean_abs_delta:.3e}", f"{self.speedup(r.method):.2f}") for r in self.rows]
        widths = [max(len(c) for c in col) for col in zip(head, *body)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def bench_rays(gset: GaussianSet, n_rays: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded rays: origins uniform in the 3-sigma padded box of the means, directions uniform."""
    rng = np.random.default_rng(seed)
    if len(gset):
        smax = 1.0 / np.sqrt(np.linalg.eigvalsh(gset.precisions)[:, 0])
        pad = 3.0 * float(smax.max())
        lo = gset.means.min(axis=0) - pad
        hi = gset.means.max(axis=0) + pad
    else:
        lo, hi = -np.ones(3), np.ones(3)
    origins = lo + (hi - lo) * rng.random((n_rays, 3))
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def bench_shadows(gset: GaussianSet, n_rays: int = 1_000_000, samples: Sequence[int] = (16, 64),
                  seed: int = 0, n_threads: int | None = None, backend: str | None = None) -> BenchReport:
    origins, dirs = bench_rays(gset, n_rays, seed)
    t0 = time.perf_counter()
    ref = kernels.transmittance_batch(gset, origins, dirs, n_threads=n_threads, backend=backend)
    rows = [BenchRow("analytic", len(gset), n_rays, max(time.perf_counter() - t0, 1e-9), 0.0)]
    for n in samples:
        t0 = time.perf_counter()
        s = kernels.sampled_transmittance_batch(gset, origins, dirs, n, seed=seed,
                                                n_threads=n_threads, backend=backend)
        dt = max(time.perf_counter() - t0, 1e-9)
        delta = float(np.mean(np.abs(s - ref))) if n_rays else 0.0
        rows.append(BenchRow(f"sampled-{n}", len(gset), n_rays, dt, delta))
    return BenchReport(rows)
