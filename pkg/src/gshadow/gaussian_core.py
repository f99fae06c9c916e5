"""Closed-form density, ray reduction and transmittance for anisotropic 3D Gaussians.

A Gaussian is stored with 13 numbers: mean (3), per-axis standard deviation (3),
the first two rows of its rotation matrix (6) and a density amplitude (1).
Along a ray ``x = o + t d`` the density of such a Gaussian is itself a 1D
Gaussian in ``t``, so the optical depth of any segment is a difference of two
error functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "InvalidParameterError",
    "Ray",
    "AnisoGaussian",
    "RayGaussian1D",
    "GaussianSet",
    "rotation_from_rot6",
    "rot6_from_rotation",
    "precision_matrix",
    "density_at",
    "reduce_to_1d",
    "segment_integral",
    "transmittance",
    "CULL_AMPLITUDE",
]

# Gaussians whose on-ray peak falls below this are skipped before erf.
CULL_AMPLITUDE = 1e-12
# Minimum |a x b| / (|a| |b|) of the two rot6 rows.
PARALLEL_TOL = 1e-6


class InvalidParameterError(ValueError):
    """Raised when a Gaussian, ray or interval violates its invariants."""


def _vec3(v, name: str) -> np.ndarray:
    a = np.array(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise InvalidParameterError(f"{name} must have 3 components, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} must be finite, got {a}")
    a.setflags(write=False)
    return a


def rotation_from_rot6(rot6) -> np.ndarray:
    """Orthonormalize the two stored rows with Gram-Schmidt.

    Returns the 3x3 matrix whose rows are the Gaussian's principal axes; the
    third row is the cross product of the first two, so det = +1.
    """
    r = np.asarray(rot6, dtype=np.float64).reshape(6)
    a, b = r[:3], r[3:]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (np.isfinite(na) and np.isfinite(nb)) or na == 0.0 or nb == 0.0:
        raise InvalidParameterError(f"degenerate rot6 {r}")
    r0 = a / na
    if np.linalg.norm(np.cross(r0, b / nb)) < PARALLEL_TOL:
        raise InvalidParameterError(f"rot6 rows are parallel: {r}")
    b_perp = b - np.dot(r0, b) * r0
    r1 = b_perp / np.linalg.norm(b_perp)
    return np.stack([r0, r1, np.cross(r0, r1)])


def rot6_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_rot6` for an orthonormal matrix."""
    return np.asarray(rot, dtype=np.float64)[:2].reshape(6).copy()


@dataclass(frozen=True, eq=False)
class Ray:
    """Half-open ray segment ``origin + t * direction`` for ``t`` in ``[t_min, t_max]``.

    The direction is normalized on construction. All formulas in this module
    assume a unit direction; a non-unit direction would rescale the reduced
    standard deviation, so it is never stored.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        o = _vec3(self.origin, "ray origin")
        d = np.array(self.direction, dtype=np.float64).reshape(-1)
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise InvalidParameterError(f"bad ray direction {d}")
        n = np.linalg.norm(d)
        if n == 0.0:
            raise InvalidParameterError("ray direction must be non-zero")
        d = d / n
        d.setflags(write=False)
        if not (self.t_min >= 0.0) or not (self.t_max > self.t_min):
            raise InvalidParameterError(
                f"need 0 <= t_min < t_max, got [{self.t_min}, {self.t_max}]"
            )
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "t_min", float(self.t_min))
        object.__setattr__(self, "t_max", float(self.t_max))

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True, eq=False)
class AnisoGaussian:
    """One anisotropic Gaussian density blob."""

    mean: np.ndarray
    sigma: np.ndarray
    rot6: np.ndarray
    amplitude: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec3(self.mean, "mean"))
        s = _vec3(self.sigma, "sigma")
        if np.any(s <= 0.0):
            raise InvalidParameterError(f"sigma must be positive, got {s}")
        object.__setattr__(self, "sigma", s)
        r6 = np.array(self.rot6, dtype=np.float64).reshape(-1)
        if r6.shape != (6,) or not np.all(np.isfinite(r6)):
            raise InvalidParameterError(f"rot6 must be 6 finite reals, got {r6}")
        r6.setflags(write=False)
        object.__setattr__(self, "rot6", r6)
        amp = float(self.amplitude)
        if not (math.isfinite(amp) and amp >= 0.0):
            raise InvalidParameterError(f"amplitude must be finite and >= 0, got {amp}")
        object.__setattr__(self, "amplitude", amp)
        # validates rot6 eagerly
        self.rotation

    @classmethod
    def isotropic(cls, mean, sigma: float, amplitude: float = 1.0) -> "AnisoGaussian":
        return cls(mean, (sigma, sigma, sigma), (1, 0, 0, 0, 1, 0), amplitude)

    @classmethod
    def from_vector(cls, v) -> "AnisoGaussian":
        v = np.asarray(v, dtype=np.float64).reshape(13)
        return cls(v[0:3], v[3:6], v[6:12], v[12])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.sigma, self.rot6, [self.amplitude]])

    @cached_property
    def rotation(self) -> np.ndarray:
        r = rotation_from_rot6(self.rot6)
        r.setflags(write=False)
        return r

    @cached_property
    def precision(self) -> np.ndarray:
        r = self.rotation
        p = r.T @ np.diag(1.0 / self.sigma**2) @ r
        p = 0.5 * (p + p.T)
        p.setflags(write=False)
        return p

    @property
    def mass(self) -> float:
        """Integral of the density over all of space."""
        return self.amplitude * float(np.prod(self.sigma)) * (2.0 * math.pi) ** 1.5

    def transformed(self, rotation: np.ndarray, translation) -> "AnisoGaussian":
        """Apply the rigid map ``x -> rotation @ x + translation``."""
        q = np.asarray(rotation, dtype=np.float64)
        new_rot = self.rotation @ q.T
        return AnisoGaussian(
            q @ self.mean + np.asarray(translation, dtype=np.float64),
            self.sigma,
            rot6_from_rotation(new_rot),
            self.amplitude,
        )

    def __eq__(self, other):
        if not isinstance(other, AnisoGaussian):
            return NotImplemented
        return bool(np.array_equal(self.to_vector(), other.to_vector()))

    def __repr__(self):
        return (
            f"AnisoGaussian(mean={self.mean.tolist()}, sigma={self.sigma.tolist()}, "
            f"rot6={self.rot6.tolist()}, amplitude={self.amplitude})"
        )


@dataclass(frozen=True)
class RayGaussian1D:
    """Density along a ray: ``amp * exp(-(t - mu)^2 / (2 sigma^2))``."""

    amp: float
    mu: float
    sigma: float

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.amp * np.exp(-0.5 * ((t - self.mu) / self.sigma) ** 2)


def precision_matrix(g: AnisoGaussian) -> np.ndarray:
    """Inverse covariance ``R^T diag(1/sigma^2) R``."""
    return np.array(g.precision)


def density_at(g: AnisoGaussian, x) -> float:
    d = g.mean - np.asarray(x, dtype=np.float64)
    return g.amplitude * math.exp(-0.5 * float(d @ g.precision @ d))


def reduce_to_1d(g: AnisoGaussian, r: Ray) -> RayGaussian1D:
    p = g.precision
    delta = g.mean - r.origin
    pd = p @ r.direction
    dd = float(r.direction @ pd)
    mu = float(pd @ delta) / dd
    q = float(delta @ p @ delta)
    # q - mu^2 dd >= 0 by Cauchy-Schwarz in the precision metric; clamp roundoff
    expo = max(q - mu * mu * dd, 0.0)
    return RayGaussian1D(g.amplitude * math.exp(-0.5 * expo), mu, 1.0 / math.sqrt(dd))


def _erf_diff(a: float, b: float) -> float:
    """erf(b) - erf(a) for a <= b, using erfc in the tails to keep precision."""
    if a >= 0.0:
        return math.erfc(a) - math.erfc(b)
    if b <= 0.0:
        return math.erfc(-b) - math.erfc(-a)
    return math.erf(b) - math.erf(a)


def segment_integral(g1d: RayGaussian1D, t0: float, t1: float) -> float:
    if not t0 <= t1:
        raise InvalidParameterError(f"invalid interval [{t0}, {t1}]")
    if t0 == t1 or g1d.amp == 0.0:
        return 0.0
    s = g1d.sigma * math.sqrt(2.0)
    return g1d.amp * g1d.sigma * math.sqrt(0.5 * math.pi) * _erf_diff(
        (t0 - g1d.mu) / s, (t1 - g1d.mu) / s
    )


def transmittance(gaussians: Iterable[AnisoGaussian], r: Ray) -> float:
    depth = 0.0
    for g in gaussians:
        g1d = reduce_to_1d(g, r)
        if g1d.amp < CULL_AMPLITUDE:
            continue
        depth += segment_integral(g1d, r.t_min, r.t_max)
    return math.exp(-depth)


class GaussianSet:
    """Structure-of-arrays view of many Gaussians, the input of the batched kernels."""

    def __init__(self, means, precisions, amplitudes, sigmas=None, rotations=None):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        self.precisions = np.ascontiguousarray(precisions, dtype=np.float64).reshape(-1, 3, 3)
        self.amplitudes = np.ascontiguousarray(amplitudes, dtype=np.float64).reshape(-1)
        self.sigmas = None if sigmas is None else np.asarray(sigmas, dtype=np.float64).reshape(-1, 3)
        self.rotations = None if rotations is None else np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        n = len(self.means)
        if len(self.precisions) != n or len(self.amplitudes) != n:
            raise InvalidParameterError("means, precisions and amplitudes disagree in length")

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[AnisoGaussian]) -> "GaussianSet":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)))
        return cls(
            [g.mean for g in gaussians],
            [g.precision for g in gaussians],
            [g.amplitude for g in gaussians],
            [g.sigma for g in gaussians],
            [g.rotation for g in gaussians],
        )

    @classmethod
    def from_parameters(cls, params) -> "GaussianSet":
        """Build from an ``(N, 13)`` parameter array without per-Gaussian objects."""
        params = np.asarray(params, dtype=np.float64).reshape(-1, 13)
        rot = np.array([rotation_from_rot6(p[6:12]) for p in params]).reshape(-1, 3, 3)
        sig = params[:, 3:6]
        if np.any(sig <= 0):
            raise InvalidParameterError("sigma must be positive")
        prec = np.einsum("nki,nk,nkj->nij", rot, 1.0 / sig**2, rot)
        return cls(params[:, 0:3], prec, params[:, 12], sig, rot)

    def __len__(self) -> int:
        return len(self.means)

    def packed_precisions(self) -> np.ndarray:
        """Upper triangle ``(p00, p01, p02, p11, p12, p22)`` per Gaussian."""
        p = self.precisions
        return np.ascontiguousarray(
            np.stack([p[:, 0, 0], p[:, 0, 1], p[:, 0, 2], p[:, 1, 1], p[:, 1, 2], p[:, 2, 2]], axis=1)
        )

    def gaussians(self) -> list[AnisoGaussian]:
        if self.sigmas is None or self.rotations is None:
            raise InvalidParameterError("set was built without sigma/rotation data")
        return [
            AnisoGaussian(m, s, rot6_from_rotation(r), a)
            for m, s, r, a in zip(self.means, self.sigmas, self.rotations, self.amplitudes)
        ]

    def bounding_sphere(self, n_sigma: float = 6.0) -> tuple[np.ndarray, float]:
        """Sphere enclosing every Gaussian's ``n_sigma`` ellipsoid."""
        if len(self) == 0:
            return np.zeros(3), 0.0
        c = 0.5 * (self.means.min(axis=0) + self.means.max(axis=0))
        # largest std of each Gaussian = 1/sqrt(smallest precision eigenvalue)
        smax = 1.0 / np.sqrt(np.linalg.eigvalsh(self.precisions)[:, 0])
        r = np.max(np.linalg.norm(self.means - c, axis=1) + n_sigma * smax)
        return c, float(r)

    def density(self, points) -> np.ndarray:
        """Summed density at ``(..., 3)`` points."""
        x = np.asarray(points, dtype=np.float64)
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        out = np.zeros(len(x))
        for m, p, a in zip(self.means, self.precisions, self.amplitudes):
            d = x - m
            out += a * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, p, d))
        return out.reshape(shape)
