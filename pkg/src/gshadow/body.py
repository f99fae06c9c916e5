"""Articulated Gaussian body: J joints with K Gaussians each, rigidly posed."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian_core import (
    AnisoGaussian,
    GaussianSet,
    InvalidParameterError,
    rotation_from_rot6,
)

log = logging.getLogger(__name__)

N_PARAMS = 13
MAX_JOINTS = 256
DEFAULT_K = 8
# re-orthonormalization larger than this (Frobenius) is logged as a warning
REORTHO_WARN = 1e-3


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint tree. ``rest_centers`` are the rest-pose joint positions in world space."""

    parents: tuple[int, ...]
    rest_centers: np.ndarray

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        j = len(parents)
        if not 1 <= j <= MAX_JOINTS:
            raise InvalidInputError(f"joint count must be in [1, {MAX_JOINTS}], got {j}")
        centers = np.array(self.rest_centers, dtype=np.float64)
        if centers.shape != (j, 3) or not np.all(np.isfinite(centers)):
            raise InvalidInputError(f"rest_centers must be finite with shape ({j}, 3)")
        for i, p in enumerate(parents):
            if p < -1 or p >= j or p == i:
                raise InvalidInputError(f"joint {i} has invalid parent {p}")
        if sum(p == -1 for p in parents) != 1:
            raise InvalidInputError("skeleton must have exactly one root")
        for i in range(j):
            seen, k = set(), i
            while k != -1:
                if k in seen:
                    raise InvalidInputError(f"cycle in parent chain of joint {i}")
                seen.add(k)
                k = parents[k]
        centers.setflags(write=False)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_centers", centers)

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def first_child(self, j: int) -> int:
        for i, p in enumerate(self.parents):
            if p == j:
                return i
        return -1

    def bone_segment(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Segment a joint's Gaussians are spread along at initialization.

        Joint to first child. Leaf joints extend half their parent bone
        beyond the joint; an isolated root collapses to a point.
        """
        a = self.rest_centers[j]
        c = self.first_child(j)
        if c >= 0:
            return a, self.rest_centers[c]
        p = self.parents[j]
        if p >= 0:
            return a, a + 0.5 * (a - self.rest_centers[p])
        return a, a

    def bone_centers(self) -> np.ndarray:
        """Midpoint of each joint and its first child; leaves use the joint itself."""
        out = np.array(self.rest_centers, dtype=np.float64)
        for j in range(self.joint_count):
            c = self.first_child(j)
            if c >= 0:
                out[j] = 0.5 * (self.rest_centers[j] + self.rest_centers[c])
        return out


def orthonormalize_transform(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Project the rotation block onto SO(3). Returns (matrix, Frobenius correction)."""
    m = np.array(m, dtype=np.float64)
    u, _, vt = np.linalg.svd(m[:3, :3])
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    corr = float(np.linalg.norm(r - m[:3, :3]))
    m[:3, :3] = r
    return m, corr


@dataclass(frozen=True, eq=False)
class PoseFrame:
    """Joint-local-to-world rigid transforms for one frame."""

    transforms: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        t = np.array(self.transforms, dtype=np.float64)
        if t.ndim != 3 or t.shape[1:] != (4, 4):
            raise InvalidInputError(f"pose transforms must be (J, 4, 4), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise InvalidInputError("pose transforms must be finite")
        if not np.allclose(t[:, 3, :], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise InvalidInputError("pose transforms must have bottom row (0, 0, 0, 1)")
        for j in range(len(t)):
            r = t[j, :3, :3]
            # rotations already orthonormal to rounding are kept bit-exact
            if np.abs(r @ r.T - np.eye(3)).max() < 1e-12 and np.linalg.det(r) > 0:
                continue
            t[j], corr = orthonormalize_transform(t[j])
            if corr > REORTHO_WARN:
                log.warning("frame %d joint %d: rotation re-orthonormalized (correction %.3g)",
                            self.timestamp, j, corr)
        t[:, 3, :] = [0.0, 0.0, 0.0, 1.0]
        t.setflags(write=False)
        object.__setattr__(self, "transforms", t)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @classmethod
    def identity(cls, joint_count: int, timestamp: int = 0) -> "PoseFrame":
        return cls(np.tile(np.eye(4), (joint_count, 1, 1)), timestamp)

    @classmethod
    def rest(cls, skeleton: Skeleton, timestamp: int = 0) -> "PoseFrame":
        """Unrotated frames placed at the rest joint positions."""
        t = np.tile(np.eye(4), (skeleton.joint_count, 1, 1))
        t[:, :3, 3] = skeleton.rest_centers
        return cls(t, timestamp)

    @property
    def joint_count(self) -> int:
        return len(self.transforms)

    def inverse(self) -> np.ndarray:
        inv = np.tile(np.eye(4), (self.joint_count, 1, 1))
        rt = np.transpose(self.transforms[:, :3, :3], (0, 2, 1))
        inv[:, :3, :3] = rt
        inv[:, :3, 3] = -np.einsum("jab,jb->ja", rt, self.transforms[:, :3, 3])
        return inv


class GaussianBody:
    """``J x K x 13`` parameter tensor of joint-local Gaussians.

    Columns are mean (3), sigma (3), rot6 (6), amplitude (1). Optional
    per-Gaussian RGB colors are carried along for the analytic rasterizer.
    """

    def __init__(self, params, colors=None):
        p = np.array(params, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != N_PARAMS or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidInputError(f"body parameters must be (J, K, 13), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("body parameters must be finite")
        if np.any(p[..., 3:6] <= 0.0):
            raise InvalidInputError("body sigma must be positive")
        if np.any(p[..., 12] < 0.0):
            raise InvalidInputError("body amplitude must be non-negative")
        try:
            for v in p.reshape(-1, N_PARAMS):
                rotation_from_rot6(v[6:12])
        except InvalidParameterError as exc:
            raise InvalidInputError(str(exc)) from exc
        p.setflags(write=False)
        self.params = p
        if colors is None:
            colors = np.full(p.shape[:2] + (3,), 0.8)
        c = np.array(colors, dtype=np.float64)
        if c.shape != p.shape[:2] + (3,):
            raise InvalidInputError(f"body colors must be (J, K, 3), got {c.shape}")
        c.setflags(write=False)
        self.colors = c

    @property
    def joint_count(self) -> int:
        return self.params.shape[0]

    @property
    def k(self) -> int:
        return self.params.shape[1]

    def __len__(self) -> int:
        return self.joint_count * self.k

    def __eq__(self, other):
        if not isinstance(other, GaussianBody):
            return NotImplemented
        return bool(np.array_equal(self.params, other.params) and np.array_equal(self.colors, other.colors))

    def local_gaussians(self) -> list[list[AnisoGaussian]]:
        return [[AnisoGaussian.from_vector(v) for v in joint] for joint in self.params]

    def with_params(self, params) -> "GaussianBody":
        return GaussianBody(params, self.colors)


def pack_parameters(body: GaussianBody) -> np.ndarray:
    return body.params.reshape(-1).copy()


def unpack_parameters(vector, joint_count: int, k: int) -> GaussianBody:
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if len(v) != joint_count * k * N_PARAMS:
        raise InvalidInputError(
            f"parameter vector has length {len(v)}, expected {joint_count * k * N_PARAMS}"
        )
    return GaussianBody(v.reshape(joint_count, k, N_PARAMS))


def _check_dims(body: GaussianBody, skeleton: Skeleton | None, pose: PoseFrame):
    if skeleton is not None and skeleton.joint_count != body.joint_count:
        raise InvalidInputError(
            f"body has {body.joint_count} joints, skeleton has {skeleton.joint_count}"
        )
    if pose.joint_count != body.joint_count:
        raise InvalidInputError(f"body has {body.joint_count} joints, pose has {pose.joint_count}")


def posed_parameters(body: GaussianBody, pose: PoseFrame) -> np.ndarray:
    """World-space ``(J*K, 13)`` parameters: means mapped affinely, axes rotated."""
    _check_dims(body, None, pose)
    p = body.params
    rot = pose.transforms[:, :3, :3]
    trans = pose.transforms[:, :3, 3]
    out = np.array(p)
    out[..., 0:3] = np.einsum("jab,jkb->jka", rot, p[..., 0:3]) + trans[:, None, :]
    # rot6 rows are axes in local coordinates; world axes are Q @ row
    out[..., 6:9] = np.einsum("jab,jkb->jka", rot, p[..., 6:9])
    out[..., 9:12] = np.einsum("jab,jkb->jka", rot, p[..., 9:12])
    return out.reshape(-1, N_PARAMS)


def pose_gaussians(body: GaussianBody, skeleton: Skeleton, pose: PoseFrame) -> list[AnisoGaussian]:
    _check_dims(body, skeleton, pose)
    return [AnisoGaussian.from_vector(v) for v in posed_parameters(body, pose)]


def posed_set(body: GaussianBody, skeleton: Skeleton | None, pose: PoseFrame) -> GaussianSet:
    """Same as :func:`pose_gaussians` but as arrays for the batched kernels."""
    _check_dims(body, skeleton, pose)
    return GaussianSet.from_parameters(posed_parameters(body, pose))


def body_density(body: GaussianBody, skeleton: Skeleton, pose: PoseFrame, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    d = posed_set(body, skeleton, pose).density(x)
    return float(d) if x.ndim == 1 else d


def init_body(skeleton: Skeleton, reference: PoseFrame, k: int = DEFAULT_K,
              sigma: float = 0.05, amplitude: float = 1.0) -> GaussianBody:
    """K isotropic Gaussians per joint, spread evenly along the joint's bone."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if reference.joint_count != skeleton.joint_count:
        raise InvalidInputError("reference pose and skeleton disagree in joint count")
    inv = reference.inverse()
    params = np.zeros((skeleton.joint_count, k, N_PARAMS))
    frac = (np.arange(k) + 0.5) / k
    for j in range(skeleton.joint_count):
        a, b = skeleton.bone_segment(j)
        world = a[None, :] + frac[:, None] * (b - a)[None, :]
        params[j, :, 0:3] = world @ inv[j, :3, :3].T + inv[j, :3, 3]
    params[..., 3:6] = sigma
    params[..., 6:12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    params[..., 12] = amplitude
    return GaussianBody(params)


def local_bone_centers(skeleton: Skeleton, reference: PoseFrame) -> np.ndarray:
    """Bone centers expressed in each joint's local frame of the reference pose."""
    inv = reference.inverse()
    b = skeleton.bone_centers()
    return np.einsum("jab,jb->ja", inv[:, :3, :3], b) + inv[:, :3, 3]


def rigid_transform(rotation, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
