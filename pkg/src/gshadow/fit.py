"""Fitting the Gaussian body to a target density field.

The objective is

    w_density * mean_p (G(x_p) - D(x_p))^2
  + w_sigma   * mean_i sum_k sigma_loss(sigma_ik)
  + w_mean    * mean_i sum_k mean_loss(mu_ik - b_ik)

with ``G`` the posed body density, ``D`` the (detached) target field and
``b`` the joint's bone center in joint-local coordinates. Gradients are
derived by hand; the optimizer is plain gradient descent on means, log-sigmas,
rot6 rows and log-amplitudes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .body import (
    GaussianBody,
    InvalidInputError,
    PoseFrame,
    Skeleton,
    local_bone_centers,
    posed_set,
)
from .gaussian_core import InvalidParameterError, rotation_from_rot6

SIGMA_KNEE = 0.02
_HEADER = struct.Struct("<3i6d")


class OptimizationError(RuntimeError):
    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# target field


class VoxelField:
    """Non-negative scalar field on a regular grid, trilinearly interpolated.

    Grid nodes span the bounding box inclusively: node ``i`` along x sits at
    ``lo.x + i * (hi.x - lo.x) / (nx - 1)``. Queries outside the box are
    clamped to the boundary.
    """

    def __init__(self, values, lo, hi):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 2:
            raise InvalidInputError(f"voxel grid must be 3D with >= 2 nodes per axis, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidInputError("voxel values must be finite and >= 0")
        lo = np.asarray(lo, dtype=np.float64).reshape(3)
        hi = np.asarray(hi, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise InvalidInputError(f"degenerate bounding box {lo} .. {hi}")
        self.values = v
        self.lo, self.hi = lo, hi

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], resolution, lo, hi) -> "VoxelField":
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
        axes = [np.linspace(a, b, n) for a, b, n in zip(lo, hi, res)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(fn(grid.reshape(-1, 3)).reshape(tuple(res)), lo, hi)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def __call__(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64)
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        n = np.array(self.values.shape)
        f = (x - self.lo) / (self.hi - self.lo) * (n - 1)
        f = np.clip(f, 0.0, n - 1)
        i0 = np.minimum(np.floor(f).astype(int), n - 2)
        w = f - i0
        out = np.zeros(len(x))
        v = self.values
        for dx in (0, 1):
            wx = w[:, 0] if dx else 1.0 - w[:, 0]
            for dy in (0, 1):
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                for dz in (0, 1):
                    wz = w[:, 2] if dz else 1.0 - w[:, 2]
                    out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out.reshape(shape)

    def save(self, path) -> None:
        """Header ``<3i6d`` (nx, ny, nz, lo, hi) then C-order float32 values, little-endian."""
        with open(path, "wb") as f:
            f.write(_HEADER.pack(*self.values.shape, *self.lo, *self.hi))
            f.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "VoxelField":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise InvalidInputError(f"{path}: truncated voxel header")
        nx, ny, nz, *box = _HEADER.unpack_from(data)
        count = nx * ny * nz
        if nx < 2 or ny < 2 or nz < 2 or len(data) != _HEADER.size + 4 * count:
            raise InvalidInputError(f"{path}: voxel payload does not match header {nx}x{ny}x{nz}")
        values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=count)
        return cls(values.reshape(nx, ny, nz).astype(np.float64), box[:3], box[3:])


# ---------------------------------------------------------------------------
# scalar losses


def loss_sigma(sigma) -> float:
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise InvalidParameterError(f"sigma must be positive, got {s}")
    vals = np.where(s <= SIGMA_KNEE, 2e-5 / s, 100.0 * (s - SIGMA_KNEE) ** 4 + 0.001)
    return float(np.sum(vals))


def loss_sigma_grad(sigma) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    return np.where(s <= SIGMA_KNEE, -2e-5 / s**2, 400.0 * (s - SIGMA_KNEE) ** 3)


def loss_mean(mu, bone_center) -> float:
    u = np.asarray(mu, dtype=np.float64) - np.asarray(bone_center, dtype=np.float64)
    return float(np.sum((100.0 * u**4 + 1.0) ** 0.25 - 1.0))


def loss_mean_grad(mu, bone_center) -> np.ndarray:
    u = np.asarray(mu, dtype=np.float64) - np.asarray(bone_center, dtype=np.float64)
    return 100.0 * u**3 * (100.0 * u**4 + 1.0) ** -0.75


def loss_density(body: GaussianBody, skeleton: Skeleton, pose: PoseFrame, field, points) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("loss_density needs at least one point")
    resid = posed_set(body, skeleton, pose).density(pts) - field(pts)
    return float(np.mean(resid**2))


# ---------------------------------------------------------------------------
# gradients


def _gram_schmidt_backward(rot6: np.ndarray, g_rows: np.ndarray) -> np.ndarray:
    """Pull gradients on the orthonormal rows (N, 3, 3) back to rot6 (N, 6)."""
    a, b = rot6[:, :3], rot6[:, 3:]
    na = np.linalg.norm(a, axis=1, keepdims=True)
    r0 = a / na
    r0b = np.sum(r0 * b, axis=1, keepdims=True)
    bp = b - r0b * r0
    nbp = np.linalg.norm(bp, axis=1, keepdims=True)
    r1 = bp / nbp
    g0, g1, g2 = g_rows[:, 0], g_rows[:, 1], g_rows[:, 2]
    # r2 = r0 x r1
    g0 = g0 + np.cross(r1, g2)
    g1 = g1 + np.cross(g2, r0)
    # r1 = bp / |bp|
    g_bp = (g1 - r1 * np.sum(r1 * g1, axis=1, keepdims=True)) / nbp
    # bp = b - (r0 . b) r0
    r0g = np.sum(r0 * g_bp, axis=1, keepdims=True)
    g_b = g_bp - r0 * r0g
    g0 = g0 - r0b * g_bp - b * r0g
    # r0 = a / |a|
    g_a = (g0 - r0 * np.sum(r0 * g0, axis=1, keepdims=True)) / na
    return np.concatenate([g_a, g_b], axis=1)


def density_loss_and_grad(params, pose: PoseFrame, target: np.ndarray,
                          points: np.ndarray) -> tuple[float, np.ndarray]:
    """L_gDensity and its gradient w.r.t. the joint-local ``(J, K, 13)`` parameters."""
    params = np.asarray(params, dtype=np.float64)
    j_count, k_count, _ = params.shape
    flat = params.reshape(-1, 13)
    n = len(flat)
    joint_of = np.repeat(np.arange(j_count), k_count)
    inv = pose.inverse()[joint_of]
    # (M, N, 3) query points in each Gaussian's joint frame
    local = np.einsum("nab,mb->mna", inv[:, :3, :3], points) + inv[None, :, :3, 3]
    rot = np.array([rotation_from_rot6(v[6:12]) for v in flat])
    sig = flat[:, 3:6]
    amp = flat[:, 12]
    delta = local - flat[None, :, 0:3]
    z = np.einsum("nkb,mnb->mnk", rot, delta)
    zs = z / sig[None]
    e = np.exp(-0.5 * np.sum(zs**2, axis=2))
    g = amp[None, :] * e
    resid = g.sum(axis=1) - target
    m = len(points)
    loss = float(np.mean(resid**2))
    dldg = (2.0 / m) * resid[:, None]  # (M, 1)
    w = dldg * g  # (M, N)
    grad = np.zeros((n, 13))
    prec = np.einsum("nki,nk,nkj->nij", rot, 1.0 / sig**2, rot)
    grad[:, 0:3] = np.einsum("mn,nij,mnj->ni", w, prec, delta)
    grad[:, 3:6] = np.einsum("mn,mnk->nk", w, zs**2) / sig
    grad[:, 12] = np.einsum("m,mn->n", dldg[:, 0], e)
    g_rows = -np.einsum("mn,mnk,mnb->nkb", w, zs / sig[None], delta)
    grad[:, 6:12] = _gram_schmidt_backward(flat[:, 6:12], g_rows)
    return loss, grad.reshape(params.shape)


def regularizer_loss_and_grad(params, bone_centers_local) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mean-over-Gaussians L_gSigma and L_gMean with their parameter gradients."""
    params = np.asarray(params, dtype=np.float64)
    n = params.shape[0] * params.shape[1]
    sig = params[..., 3:6]
    mu = params[..., 0:3]
    b = np.broadcast_to(np.asarray(bone_centers_local)[:, None, :], mu.shape)
    l_sig = loss_sigma(sig) / n
    l_mean = loss_mean(mu, b) / n
    g_sig = np.zeros_like(params)
    g_sig[..., 3:6] = loss_sigma_grad(sig) / n
    g_mean = np.zeros_like(params)
    g_mean[..., 0:3] = loss_mean_grad(mu, b) / n
    return l_sig, l_mean, g_sig, g_mean


# ---------------------------------------------------------------------------
# schedules and config


class PiecewiseLinearSchedule:
    """Weight as a function of iteration: linear between knots, held outside."""

    def __init__(self, knots: Sequence[tuple[float, float]]):
        knots = sorted((float(t), float(v)) for t, v in knots)
        if not knots:
            raise ValueError("schedule needs at least one knot")
        self.t = np.array([k[0] for k in knots])
        self.v = np.array([k[1] for k in knots])

    @classmethod
    def constant(cls, value: float) -> "PiecewiseLinearSchedule":
        return cls([(0.0, value)])

    @classmethod
    def ramp(cls, start: float, end: float, v0: float = 0.0, v1: float = 1.0) -> "PiecewiseLinearSchedule":
        if not start < end:
            raise ValueError("ramp needs start < end")
        return cls([(start, v0), (end, v1)])

    def __call__(self, it: float) -> float:
        return float(np.interp(it, self.t, self.v))


@dataclass
class FitConfig:
    iterations: int = 2000
    step_size: float = 0.1
    batch_size: int = 1024
    w_density: float = 1.0
    w_sigma: float = 0.0
    w_mean: float = 0.0
    seed: int = 0
    # per-group step multipliers: means, log-sigma, rot6, log-amplitude
    group_scales: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    density_schedule: PiecewiseLinearSchedule | None = None
    sigma_schedule: PiecewiseLinearSchedule | None = None
    mean_schedule: PiecewiseLinearSchedule | None = None
    eval_points: int = 4096
    check_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if min(self.w_density, self.w_sigma, self.w_mean) < 0:
            raise ValueError("loss weights must be >= 0")

    def weights(self, it: int) -> tuple[float, float, float]:
        def w(base, sched):
            return base * (sched(it) if sched is not None else 1.0)

        return (w(self.w_density, self.density_schedule), w(self.w_sigma, self.sigma_schedule),
                w(self.w_mean, self.mean_schedule))


# ---------------------------------------------------------------------------
# fitting


def sample_query_points(field, body: GaussianBody, pose: PoseFrame, n: int, seed) -> np.ndarray:
    """Half uniform in the field's box, half inside the posed Gaussians' 3-sigma ellipsoids."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_near = n // 2
    uniform = rng.uniform(field.lo, field.hi, size=(n - n_near, 3))
    gset = posed_set(body, None, pose)
    pick = rng.integers(0, len(gset), size=n_near)
    u = rng.normal(size=(n_near, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= 3.0 * rng.uniform(size=(n_near, 1)) ** (1.0 / 3.0)
    # principal-frame offset -> world: x = mu + R^T (sigma * u)
    near = gset.means[pick] + np.einsum("nki,nk->ni", gset.rotations[pick], gset.sigmas[pick] * u)
    near = np.clip(near, field.lo, field.hi)
    return np.concatenate([uniform, near])


@dataclass
class FitResult:
    body: GaussianBody
    trace: list[float] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    best_iteration: int = 0


def _to_opt(params: np.ndarray) -> np.ndarray:
    u = np.array(params)
    u[..., 3:6] = np.log(params[..., 3:6])
    u[..., 12] = np.log(np.maximum(params[..., 12], 1e-300))
    return u


def _from_opt(u: np.ndarray) -> np.ndarray:
    p = np.array(u)
    p[..., 3:6] = np.exp(u[..., 3:6])
    p[..., 12] = np.exp(u[..., 12])
    return p


def _reorthonormalize(params: np.ndarray) -> np.ndarray:
    flat = params.reshape(-1, 13)
    for v in flat:
        v[6:12] = rotation_from_rot6(v[6:12])[:2].reshape(6)
    return params


class Objective:
    """Total fit loss and gradient for a fixed skeleton, reference pose and field."""

    def __init__(self, skeleton: Skeleton, pose: PoseFrame, field, cfg: FitConfig):
        self.pose = pose
        self.field = field
        self.cfg = cfg
        self.bones = local_bone_centers(skeleton, pose)

    def __call__(self, params, points, target, it: int = 0):
        wd, ws, wm = self.cfg.weights(it)
        ld, gd = density_loss_and_grad(params, self.pose, target, points)
        ls, lm, gs, gm = regularizer_loss_and_grad(params, self.bones)
        total = wd * ld + ws * ls + wm * lm
        return total, wd * gd + ws * gs + wm * gm


def fit(body0: GaussianBody, skeleton: Skeleton, pose: PoseFrame, field, cfg: FitConfig) -> FitResult:
    """Gradient descent from ``body0``; returns the best checkpoint on a fixed evaluation set.

    The returned parameters never score worse than ``body0`` on that set.
    """
    if body0.joint_count != skeleton.joint_count or pose.joint_count != skeleton.joint_count:
        raise InvalidInputError("body, skeleton and pose disagree in joint count")
    obj = Objective(skeleton, pose, field, cfg)
    eval_pts = sample_query_points(field, body0, pose, cfg.eval_points, [cfg.seed, 1 << 31])
    eval_target = field(eval_pts)

    def eval_loss(p, it):
        return obj(p, eval_pts, eval_target, it)[0]

    scales = np.zeros(13)
    scales[0:3], scales[3:6], scales[6:12], scales[12] = cfg.group_scales
    params = np.array(body0.params)
    u = _to_opt(params)
    best = params.copy()
    best_loss = initial = eval_loss(params, cfg.iterations)
    best_it = 0
    trace = []
    points, target = None, None
    for it in range(cfg.iterations):
        cur = body0.with_params(params)
        points = sample_query_points(field, cur, pose, cfg.batch_size, [cfg.seed, it])
        target = field(points)
        loss, grad = obj(params, points, target, it)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise OptimizationError(it)
        trace.append(loss)
        # chain rule into log-sigma / log-amplitude
        grad[..., 3:6] *= params[..., 3:6]
        grad[..., 12] *= params[..., 12]
        u = u - cfg.step_size * scales * grad
        with np.errstate(over="ignore", under="ignore"):
            params = _from_opt(u)
        if not np.all(np.isfinite(params)) or np.any(params[..., 3:6] <= 0.0):
            raise OptimizationError(it, "non-finite parameters")
        params = _reorthonormalize(params)
        u = _to_opt(params)
        if (it + 1) % cfg.check_every == 0 or it + 1 == cfg.iterations:
            l_eval = eval_loss(params, cfg.iterations)
            if not math.isfinite(l_eval):
                raise OptimizationError(it)
            if l_eval <= best_loss:
                best, best_loss, best_it = params.copy(), l_eval, it + 1
    return FitResult(body0.with_params(best), trace, initial, best_loss, best_it)
