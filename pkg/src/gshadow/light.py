"""Recovering the directional light and ambient term from reference images.

The light direction is parametrized by (azimuth, elevation), so it is unit
length at every step. Gradients come from central finite differences through
the shadow-and-shading pass; G-buffers do not depend on the light and are
computed once per reference. Updates use Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .body import posed_set
from .fit import OptimizationError, PiecewiseLinearSchedule
from .shading import (
    DirectionalLight,
    angles_from_direction,
    direction_from_angles,
    frame_gbuffer,
    shade_pixel,
)

AMBIENT_PRIOR = 0.1
GREY = 0.75


@dataclass
class LightParams:
    azimuth: float
    elevation: float
    ambient: np.ndarray = field(default_factory=lambda: np.full(3, AMBIENT_PRIOR))

    def __post_init__(self):
        self.azimuth = float(self.azimuth)
        self.elevation = float(self.elevation)
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError("elevation must lie in [-pi/2, pi/2]")
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)

    @property
    def direction(self) -> np.ndarray:
        return direction_from_angles(self.azimuth, self.elevation)

    @classmethod
    def from_light(cls, light: DirectionalLight) -> "LightParams":
        az, el = angles_from_direction(light.direction)
        return cls(az, el, light.ambient.copy())

    def antipodal(self) -> "LightParams":
        az = math.remainder(self.azimuth + math.pi, 2 * math.pi)
        return LightParams(az, -self.elevation, self.ambient.copy())

    def to_light(self, color=(1.5, 1.5, 1.5)) -> DirectionalLight:
        return DirectionalLight(self.direction, np.asarray(color), self.ambient)

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.azimuth, self.elevation], self.ambient])

    @classmethod
    def from_vector(cls, v) -> "LightParams":
        return cls(v[0], v[1], v[2:5])


def angular_error_deg(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


# ---------------------------------------------------------------------------
# losses


def _masked(img, mask):
    img = np.asarray(img, dtype=np.float64)
    m = np.ones(img.shape[:2], dtype=bool) if mask is None else np.asarray(mask) > 0.5
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != img.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {img.shape[:2]}")
    return img[m]


def loss_rgb(rendered, reference, mask=None) -> float:
    """Mean absolute per-channel error over masked pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    diff = _masked(np.abs(rendered - reference), mask)
    return float(diff.mean()) if diff.size else 0.0


def loss_grey(rendered, mask=None) -> float:
    vals = _masked(np.abs(np.asarray(rendered, dtype=np.float64) - GREY), mask)
    return float(vals.mean()) if vals.size else 0.0


def loss_mask(accumulation, mask) -> float:
    a = np.asarray(accumulation, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if a.shape != m.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {m.shape}")
    return float(np.mean(np.abs(a - m)))


def loss_ambient(ambient) -> float:
    a = np.asarray(ambient, dtype=np.float64)
    return float(np.sum((a - AMBIENT_PRIOR) ** 2))


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveConfig:
    iterations: int = 300
    step_size: float = 0.05
    schedule_start: int = 0
    schedule_end: int = 150
    final_step_fraction: float = 0.05
    w_amb: float = 0.1
    seed: int = 0
    fd_angle: float = 1e-3
    fd_ambient: float = 1e-3
    batch_frames: int = 4

    def __post_init__(self):
        if not self.schedule_start < self.schedule_end:
            raise ValueError("schedule_start must be < schedule_end")
        if self.iterations < self.schedule_end:
            raise ValueError("iterations must be >= schedule_end")
        if self.batch_frames < 1:
            raise ValueError("batch_frames must be >= 1")
        if not 0 < self.final_step_fraction <= 1:
            raise ValueError("final_step_fraction must lie in (0, 1]")

    def blend(self) -> PiecewiseLinearSchedule:
        return PiecewiseLinearSchedule.ramp(self.schedule_start, self.schedule_end)

    def step(self) -> PiecewiseLinearSchedule:
        # full step through the grey-to-RGB ramp, then linear decay
        if self.iterations == self.schedule_end:
            return PiecewiseLinearSchedule.constant(self.step_size)
        return PiecewiseLinearSchedule.ramp(self.schedule_end, self.iterations, self.step_size,
                                            self.step_size * self.final_step_fraction)


@dataclass
class Reference:
    image: np.ndarray
    mask: np.ndarray | None
    frame: int
    camera: int = 0


class _Prepared:
    """Light-independent data for one reference: G-buffer, shadow origins, Gaussians."""

    def __init__(self, scene, ref: Reference):
        gb = frame_gbuffer(scene, ref.frame, ref.camera)
        mask = gb.foreground if ref.mask is None else np.asarray(ref.mask) > 0.5
        if mask.ndim == 3:
            mask = mask[..., 0]
        if ref.image.shape[:2] != gb.shape or mask.shape != gb.shape:
            raise ValueError(f"reference for frame {ref.frame} has size {ref.image.shape[:2]}, "
                             f"render has {gb.shape}")
        use = mask & gb.foreground & ~gb.invalid_pixels()
        self.n_mask = int(mask.sum())
        self.albedo = gb.albedo[use]
        self.normal = gb.normal[use]
        self.target = np.asarray(ref.image, dtype=np.float64)[use]
        # masked pixels without geometry render black
        self.black = np.asarray(ref.image, dtype=np.float64)[mask & ~use]
        cam = scene.cameras[ref.camera]
        self.origins = gb.surface_points(cam)[use] + scene.shadow_bias * self.normal
        self.gset = posed_set(scene.body, scene.skeleton, scene.poses[ref.frame])

    def shadows(self, direction) -> np.ndarray:
        return kernels.transmittance_batch(self.gset, self.origins,
                                           np.broadcast_to(direction, self.origins.shape))

    def losses(self, s, light: DirectionalLight) -> tuple[float, float]:
        """(L_grey, L_RGB) over the masked pixels."""
        if self.n_mask == 0:
            return 0.0, 0.0
        c = shade_pixel(self.albedo, self.normal, s, light)
        n = 3 * self.n_mask
        grey = (np.abs(c - GREY).sum() + np.abs(0.0 - GREY) * self.black.size) / n
        rgb = (np.abs(c - self.target).sum() + np.abs(self.black).sum()) / n
        return float(grey), float(rgb)


@dataclass
class SolveResult:
    params: LightParams
    trace: list[float]


class LightObjective:
    """Scheduled loss over prepared references and its finite-difference gradient."""

    def __init__(self, scene, references: Sequence[Reference], w_amb: float = 0.1):
        if not references:
            raise ValueError("need at least one reference")
        self.prepared = [_Prepared(scene, r) for r in references]
        self.color = scene.light.color
        self.w_amb = w_amb

    def __len__(self) -> int:
        return len(self.prepared)

    def shadows(self, vec, batch) -> list[np.ndarray]:
        d = direction_from_angles(vec[0], vec[1])
        return [self.prepared[i].shadows(d) for i in batch]

    def value(self, vec, beta: float, batch=None, shadows=None) -> float:
        """(1 - beta) L_grey + beta L_RGB averaged over ``batch``, plus the ambient prior."""
        vec = np.asarray(vec, dtype=np.float64)
        batch = range(len(self.prepared)) if batch is None else batch
        shadows = self.shadows(vec, batch) if shadows is None else shadows
        light = DirectionalLight(direction_from_angles(vec[0], vec[1]), self.color, vec[2:5])
        total = 0.0
        for i, s in zip(batch, shadows):
            grey, rgb = self.prepared[i].losses(s, light)
            total += (1.0 - beta) * grey + beta * rgb
        return total / len(batch) + self.w_amb * loss_ambient(vec[2:5])

    def gradient(self, vec, beta: float, batch=None, h_angle: float = 1e-3, h_ambient: float = 1e-3,
                 base_shadows=None) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        batch = range(len(self.prepared)) if batch is None else batch
        grad = np.zeros(5)
        for k in (0, 1):
            e = np.zeros(5)
            e[k] = h_angle
            grad[k] = (self.value(vec + e, beta, batch) - self.value(vec - e, beta, batch)) / (2 * h_angle)
        # ambient does not move shadows
        base = self.shadows(vec, batch) if base_shadows is None else base_shadows
        for k in (2, 3, 4):
            e = np.zeros(5)
            e[k] = h_ambient
            grad[k] = (self.value(vec + e, beta, batch, base)
                       - self.value(vec - e, beta, batch, base)) / (2 * h_ambient)
        return grad


def solve(scene, references: Sequence[Reference], cfg: SolveConfig = SolveConfig(),
          init: LightParams | None = None) -> SolveResult:
    """Adam on (azimuth, elevation, ambient) minimizing the grey/RGB blend plus the ambient prior."""
    obj = LightObjective(scene, references, cfg.w_amb)
    blend = cfg.blend()
    lr = cfg.step()
    rng = np.random.default_rng(cfg.seed)
    p = (init or LightParams(0.0, 1.45)).vector()
    m = np.zeros(5)
    v = np.zeros(5)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    n_batch = min(cfg.batch_frames, len(obj))

    for it in range(cfg.iterations):
        beta = blend(it)
        batch = sorted(rng.choice(len(obj), size=n_batch, replace=False))
        base = obj.shadows(p, batch)
        loss = obj.value(p, beta, batch, base)
        if not math.isfinite(loss):
            raise OptimizationError(it)
        trace.append(loss)
        grad = obj.gradient(p, beta, batch, cfg.fd_angle, cfg.fd_ambient, base)
        if not np.all(np.isfinite(grad)):
            raise OptimizationError(it, "non-finite gradient")
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mh = m / (1 - b1 ** (it + 1))
        vh = v / (1 - b2 ** (it + 1))
        p = p - lr(it) * mh / (np.sqrt(vh) + eps)
        p[0] = math.remainder(p[0], 2 * math.pi)
        p[1] = min(max(p[1], -math.pi / 2), math.pi / 2)
        p[2:5] = np.clip(p[2:5], 0.0, 1.0)
    return SolveResult(LightParams.from_vector(p), trace)


def self_references(scene, frames=None, cameras=None, light: DirectionalLight | None = None) -> list[Reference]:
    """Render lit references of ``scene`` (masked to the foreground) for testing the solver."""
    from .shading import render

    frames = range(len(scene.poses)) if frames is None else frames
    cameras = range(len(scene.cameras)) if cameras is None else cameras
    refs = []
    for f in frames:
        for c in cameras:
            gb = frame_gbuffer(scene, f, c)
            img = render(scene, f, "lit", c, light=light, gbuffer=gb)
            refs.append(Reference(img, gb.mask, f, c))
    return refs
