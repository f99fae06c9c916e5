"""Brute-force references: quadrature transmittance, NeRF-style sampled shadows,
central finite differences. Written for clarity, not speed."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._pykernels import splitmix64
from .gaussian_core import AnisoGaussian, GaussianSet, Ray

# a one-sided 6-sigma tail holds < 1e-9 of a Gaussian's mass
EXTENSION_SIGMAS = 6.0


class ProbeError(ArithmeticError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite loss probe at coordinate {index}: {value}")
        self.index = index


@dataclass(frozen=True)
class QuadratureConfig:
    n: int = 100_000

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("quadrature needs n >= 2")


def _density_along(gaussians: Sequence[AnisoGaussian], ray: Ray, t: np.ndarray) -> np.ndarray:
    """Sum of 3D densities at ``origin + t * direction``, one coordinate row at a time."""
    total = np.zeros(len(t))
    q = np.empty(len(t))
    tmp = np.empty(len(t))
    for g in gaussians:
        d = []
        for k in range(3):
            dk = t * ray.direction[k]
            dk += ray.origin[k] - g.mean[k]
            d.append(dk)
        p = g.precision
        q.fill(0.0)
        for i, j, w in ((0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 1, 2.0), (0, 2, 2.0), (1, 2, 2.0)):
            np.multiply(d[i], d[j], out=tmp)
            tmp *= w * p[i, j]
            q += tmp
        q *= -0.5
        np.exp(q, out=q)
        q *= g.amplitude
        total += q
    return total


def quad_bounds(gaussians: Sequence[AnisoGaussian], ray: Ray) -> tuple[float, float]:
    """Integration range; an infinite far end is cut where every Gaussian's
    6-sigma ellipsoid lies behind the ray position."""
    t0 = ray.t_min
    if math.isfinite(ray.t_max):
        return t0, ray.t_max
    far = max(
        float((g.mean - ray.origin) @ ray.direction) + EXTENSION_SIGMAS * float(g.sigma.max())
        for g in gaussians
    )
    return t0, max(far, t0)


def quad_transmittance(gaussians: Sequence[AnisoGaussian], ray: Ray,
                       cfg: QuadratureConfig = QuadratureConfig()) -> float:
    gaussians = list(gaussians)
    if not gaussians:
        return 1.0
    t0, t1 = quad_bounds(gaussians, ray)
    if t1 <= t0:
        return 1.0
    t, dt = np.linspace(t0, t1, cfg.n, retstep=True)
    y = _density_along(gaussians, ray, t)
    # trapezoid rule on the uniform grid
    return math.exp(-dt * (y.sum() - 0.5 * (y[0] + y[-1])))


def nerf_style_shadow(gaussians: Sequence[AnisoGaussian], ray: Ray, n: int,
                      seed: int = 0, jitter: bool = True) -> float:
    """Shadow value a NeRF would compute along one secondary ray.

    ``n`` stratified samples over the chord of the Gaussians' bounding sphere;
    each bin contributes ``exp(-density * width)``. The per-sample jitter comes
    from a counter hash of (seed, sample index) so it matches the batched
    kernel for a single ray.
    """
    if n < 2:
        raise ValueError("nerf_style_shadow needs n >= 2")
    gaussians = list(gaussians)
    if not gaussians:
        return 1.0
    gset = GaussianSet.from_gaussians(gaussians)
    c, r = gset.bounding_sphere()
    proj = float((c - ray.origin) @ ray.direction)
    near, far = max(ray.t_min, proj - r), min(ray.t_max, proj + r)
    if far <= near:
        return 1.0
    width = (far - near) / n
    k = np.arange(n, dtype=np.uint64)
    if jitter:
        h = splitmix64(splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) ^ k)
        u = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
    else:
        u = np.full(n, 0.5)
    t = near + (k.astype(np.float64) + u) * width
    alphas = np.exp(-_density_along(gaussians, ray, t) * width)
    return float(np.prod(alphas))


def fd_gradient(loss: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h``."""
    if not h > 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(p)
    for i in range(len(p)):
        x = p.copy()
        x[i] = p[i] + h
        fp = float(loss(x))
        if not math.isfinite(fp):
            raise ProbeError(i, fp)
        x[i] = p[i] - h
        fm = float(loss(x))
        if not math.isfinite(fm):
            raise ProbeError(i, fm)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(np.shape(params))
