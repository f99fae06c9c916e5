"""Deferred Lambertian shading with Gaussian cast shadows.

Lighting is applied per pixel on top of a G-buffer (albedo, normal, depth,
mask)::

    color = albedo * (ambient + s * light_color * max(0, light_dir . normal))

where ``s`` is the analytic transmittance of a secondary ray from the surface
point toward the light.

World conventions: y is up. Cameras follow the OpenCV pinhole model (x right,
y down, z forward) and ``depth`` is the distance along the unit view ray, so
the surface point is ``camera_center + depth * view_dir``.

Environment lighting (``relight_hdri``) estimates the Lambertian outgoing
radiance ``albedo / pi * integral(L(w) V(w) cos)``. The brightest texel is
treated as a separate light: one ray toward its center contributes
``L_sun * solid_angle * cos / pi`` times its transmittance. The remaining rays
are cosine-distributed (normal plus a uniform point on the unit sphere), so
each contributes its radiance times transmittance with equal weight; the sun
texel is excluded from them to avoid counting it twice. With a single ray the
estimate is the sun term alone. A uniform sky of radiance L gives
``albedo * L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .gaussian_core import GaussianSet, InvalidParameterError
from .imageio import read_pfm, write_pfm

DEFAULT_LIGHT_COLOR = (1.5, 1.5, 1.5)
DEFAULT_BIAS = 0.02
MODES = ("lit", "albedo", "shadow", "normal", "depth")


class UsageError(ValueError):
    pass


def direction_from_angles(azimuth: float, elevation: float) -> np.ndarray:
    """Unit vector for (azimuth, elevation) in radians, y up; azimuth 0 points along +z."""
    ce = math.cos(elevation)
    return np.array([ce * math.sin(azimuth), math.sin(elevation), ce * math.cos(azimuth)])


def angles_from_direction(d) -> tuple[float, float]:
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return math.atan2(d[0], d[2]), math.asin(float(np.clip(d[1], -1.0, 1.0)))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = -rot @ eye
    return m


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be >= 1")
        m = np.array(self.world_to_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameterError("world_to_camera must be 4x4")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("camera rotation must be orthonormal")
        m.setflags(write=False)
        object.__setattr__(self, "world_to_camera", m)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def looking_at(cls, eye, target, width: int, height: int, fov_y_deg: float = 40.0) -> "Camera":
        f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, look_at(eye, target))

    @property
    def center(self) -> np.ndarray:
        r, t = self.world_to_camera[:3, :3], self.world_to_camera[:3, 3]
        return -r.T @ t

    def view_dirs(self) -> np.ndarray:
        """Unit world-space view directions through pixel centers, ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d = np.stack([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy,
                      np.ones_like(u)], axis=-1)
        d = d @ self.world_to_camera[:3, :3]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(eq=False)
class GBuffer:
    """Per-pixel geometry. Missing normals/depths are NaN."""

    albedo: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim == 3:
            self.mask = self.mask[..., 0]
        h, w = self.mask.shape
        if self.albedo.shape != (h, w, 3) or self.normal.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise InvalidParameterError("G-buffer channels disagree in size")
        n = np.linalg.norm(self.normal, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.normal = np.where(n > 0, self.normal / n, np.nan)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def foreground(self) -> np.ndarray:
        return self.mask > 0.5

    def invalid_pixels(self) -> np.ndarray:
        """Foreground pixels whose depth or normal is missing."""
        bad = ~np.isfinite(self.depth) | (self.depth <= 0) | ~np.all(np.isfinite(self.normal), axis=-1)
        return self.foreground & bad

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_pfm(d / "albedo.pfm", self.albedo)
        write_pfm(d / "normal.pfm", self.normal)
        write_pfm(d / "depth.pfm", self.depth)
        write_pfm(d / "mask.pfm", self.mask)

    @classmethod
    def load(cls, directory) -> "GBuffer":
        d = Path(directory)
        return cls(read_pfm(d / "albedo.pfm"), read_pfm(d / "normal.pfm"),
                   read_pfm(d / "depth.pfm"), read_pfm(d / "mask.pfm"))

    def surface_points(self, camera: Camera) -> np.ndarray:
        return camera.center + self.depth[..., None] * camera.view_dirs()


@dataclass(frozen=True, eq=False)
class DirectionalLight:
    direction: np.ndarray
    color: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LIGHT_COLOR))
    ambient: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.1]))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not n > 0:
            raise InvalidParameterError("light direction must be non-zero")
        object.__setattr__(self, "direction", d / n)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "ambient", np.asarray(self.ambient, dtype=np.float64).reshape(3))

    @classmethod
    def from_angles(cls, azimuth, elevation, ambient=(0.1, 0.1, 0.1), color=DEFAULT_LIGHT_COLOR):
        return cls(direction_from_angles(azimuth, elevation), np.asarray(color), np.asarray(ambient))


class EnvironmentMap:
    """Equirectangular radiance map; row 0 looks straight up (+y)."""

    def __init__(self, image):
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidParameterError(f"environment map must be (H, W, 3), got {img.shape}")
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise InvalidParameterError("environment radiance must be finite and >= 0")
        self.image = img
        h, w = img.shape[:2]
        lum = img @ np.array([0.2126, 0.7152, 0.0722])
        # argmax returns the lowest row-major index on ties
        self.sun_index = int(np.argmax(lum))
        r, c = divmod(self.sun_index, w)
        self.sun_direction = self.texel_direction(r, c)
        self.sun_radiance = img[r, c].copy()
        self.sun_solid_angle = self.texel_solid_angle(r)

    @classmethod
    def constant(cls, radiance, height: int = 32, width: int = 64) -> "EnvironmentMap":
        return cls(np.broadcast_to(np.asarray(radiance, dtype=np.float64), (height, width, 3)).copy())

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def texel_direction(self, row: int, col: int) -> np.ndarray:
        h, w = self.resolution
        theta = (row + 0.5) / h * math.pi
        phi = (col + 0.5) / w * 2 * math.pi - math.pi
        st = math.sin(theta)
        return np.array([st * math.cos(phi), math.cos(theta), st * math.sin(phi)])

    def texel_solid_angle(self, row: int) -> float:
        h, w = self.resolution
        t0, t1 = row / h * math.pi, (row + 1) / h * math.pi
        return (2 * math.pi / w) * (math.cos(t0) - math.cos(t1))

    def texel_index(self, dirs) -> tuple[np.ndarray, np.ndarray]:
        d = np.asarray(dirs, dtype=np.float64)
        h, w = self.resolution
        theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
        phi = np.arctan2(d[..., 2], d[..., 0])
        row = np.clip((theta / math.pi * h).astype(int), 0, h - 1)
        col = np.clip(((phi + math.pi) / (2 * math.pi) * w).astype(int), 0, w - 1)
        return row, col

    def lookup(self, dirs) -> np.ndarray:
        row, col = self.texel_index(dirs)
        return self.image[row, col]


@dataclass
class GroundPlane:
    point: np.ndarray
    normal: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = n / np.linalg.norm(n)
        self.background = np.asarray(self.background, dtype=np.float64)

    def background_image(self, height: int, width: int) -> np.ndarray:
        b = self.background
        if b.shape == (3,):
            return np.broadcast_to(b, (height, width, 3)).copy()
        if b.shape != (height, width, 3):
            raise InvalidParameterError(f"background image {b.shape} does not match ({height}, {width}, 3)")
        return b.copy()


# ---------------------------------------------------------------------------
# shading


def shade_pixel(albedo, normal, s, light: DirectionalLight) -> np.ndarray:
    """Lambertian color; broadcasts over leading pixel axes."""
    albedo = np.asarray(albedo, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    cos = np.maximum(0.0, normal @ light.direction)
    return albedo * (light.ambient + (s * cos)[..., None] * light.color)


class ShadowMap(NamedTuple):
    values: np.ndarray
    invalid_pixels: int


def shadow_map(gbuffer: GBuffer, camera: Camera, gset: GaussianSet, light: DirectionalLight,
               bias: float = DEFAULT_BIAS, n_threads: int | None = None) -> ShadowMap:
    """Transmittance toward the light for every foreground pixel; 1 elsewhere."""
    s = np.ones(gbuffer.shape)
    invalid = gbuffer.invalid_pixels()
    fg = gbuffer.foreground & ~invalid
    if np.any(fg) and len(gset):
        pts = gbuffer.surface_points(camera)[fg] + bias * gbuffer.normal[fg]
        dirs = np.broadcast_to(light.direction, pts.shape)
        s[fg] = kernels.transmittance_batch(gset, pts, dirs, 0.0, math.inf, n_threads)
    return ShadowMap(np.clip(s, 0.0, 1.0), int(invalid.sum()))


def ground_shadow(plane: GroundPlane, gset: GaussianSet, light: DirectionalLight, camera: Camera,
                  gbuffer: GBuffer | None = None, n_threads: int | None = None) -> np.ndarray:
    """Background modulated by the Gaussian shadow on the plane."""
    h, w = camera.height, camera.width
    img = plane.background_image(h, w)
    if len(gset) == 0:
        return img
    dirs = camera.view_dirs()
    o = camera.center
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((plane.point - o) @ plane.normal) / denom
    hit = np.isfinite(t) & (t > 0) & (np.abs(denom) > 1e-12)
    if gbuffer is not None:
        hit &= ~gbuffer.foreground
    if np.any(hit):
        pts = o + t[hit][:, None] * dirs[hit]
        s = kernels.transmittance_batch(gset, pts, np.broadcast_to(light.direction, pts.shape),
                                        0.0, math.inf, n_threads)
        img[hit] *= s[:, None]
    return img


def _pixel_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def cosine_directions(normals: np.ndarray, count: int, seed: int, pixel_ids: np.ndarray) -> np.ndarray:
    """``count`` cosine-distributed directions per pixel: normalize(n + uniform sphere point)."""
    out = np.empty((len(normals), count, 3))
    for i, (n, pid) in enumerate(zip(normals, pixel_ids)):
        u = _pixel_rng(seed, int(pid)).normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        d = n + u
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        # u == -n has probability zero; fall back to the normal itself
        out[i] = np.where(norm > 1e-9, d / np.maximum(norm, 1e-300), n)
    return out


def relight_hdri(gbuffer: GBuffer, camera: Camera, gset: GaussianSet, env: EnvironmentMap,
                 n_rays: int = 64, seed: int = 0, bias: float = DEFAULT_BIAS,
                 n_threads: int | None = None) -> np.ndarray:
    """Environment-lit image; background pixels show the environment along the view ray."""
    if n_rays < 1:
        raise UsageError("n_rays must be >= 1")
    h, w = gbuffer.shape
    out = env.lookup(camera.view_dirs())
    fg = gbuffer.foreground & ~gbuffer.invalid_pixels()
    if not np.any(fg):
        return out
    ids = np.flatnonzero(fg.reshape(-1))
    normals = gbuffer.normal[fg]
    pts = gbuffer.surface_points(camera)[fg] + bias * normals
    n_pix = len(pts)

    sun = env.sun_direction
    cos_sun = np.maximum(0.0, normals @ sun)
    t_sun = kernels.transmittance_batch(gset, pts, np.broadcast_to(sun, pts.shape), n_threads=n_threads)
    radiance = (env.sun_solid_angle / math.pi) * cos_sun[:, None] * t_sun[:, None] * env.sun_radiance

    if n_rays > 1:
        dirs = cosine_directions(normals, n_rays - 1, seed, ids)
        origins = np.repeat(pts, n_rays - 1, axis=0)
        vis = kernels.transmittance_batch(gset, origins, dirs.reshape(-1, 3), n_threads=n_threads)
        row, col = env.texel_index(dirs)
        sky = env.image[row, col]
        sky[row * env.resolution[1] + col == env.sun_index] = 0.0
        radiance = radiance + np.mean(sky * vis.reshape(n_pix, n_rays - 1, 1), axis=1)

    out[fg] = gbuffer.albedo[fg] * radiance
    return out


# ---------------------------------------------------------------------------
# analytic G-buffer


def rasterize_gbuffer(camera: Camera, gset: GaussianSet, colors=None, level: float = 1.0) -> GBuffer:
    """G-buffer from the Gaussians' ``level``-sigma ellipsoids seen by ``camera``.

    Depth is the nearest ellipsoid hit, the normal the gradient of the
    ellipsoid's quadratic form there, albedo the hit Gaussian's color.
    """
    h, w = camera.height, camera.width
    dirs = camera.view_dirs().reshape(-1, 3)
    o = camera.center
    n_pix = len(dirs)
    depth = np.full(n_pix, np.inf)
    which = np.full(n_pix, -1)
    for i, (m, p) in enumerate(zip(gset.means, gset.precisions)):
        e = o - m
        pd = dirs @ p
        a = np.einsum("ni,ni->n", pd, dirs)
        b = 2.0 * (pd @ e)
        c = float(e @ p @ e) - level * level
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        # camera inside the ellipsoid: skip that Gaussian rather than see its inside
        t = np.where(t0 > 0, t0, np.inf) if c > 0 else np.full(n_pix, np.inf)
        t = np.where(ok, t, np.inf)
        closer = t < depth
        depth[closer] = t[closer]
        which[closer] = i
    hit = which >= 0
    normal = np.full((n_pix, 3), np.nan)
    albedo = np.zeros((n_pix, 3))
    if np.any(hit):
        idx = which[hit]
        x = o + depth[hit, None] * dirs[hit]
        g = np.einsum("nij,nj->ni", gset.precisions[idx], x - gset.means[idx])
        normal[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
        cols = np.full((len(gset), 3), 0.8) if colors is None else np.asarray(colors).reshape(-1, 3)
        albedo[hit] = cols[idx]
    depth[~hit] = np.nan
    return GBuffer(albedo.reshape(h, w, 3), normal.reshape(h, w, 3), depth.reshape(h, w),
                   hit.reshape(h, w).astype(np.float64))


# ---------------------------------------------------------------------------
# full frame


def frame_gbuffer(scene, frame: int, camera_index: int = 0) -> GBuffer:
    from .body import posed_set

    cam = scene.cameras[camera_index]
    src = scene.gbuffer_source
    if src.get("type", "analytic") == "files":
        base = Path(src["dir"])
        sub = base / f"frame_{frame}"
        return GBuffer.load(sub if sub.is_dir() else base)
    gset = posed_set(scene.body, scene.skeleton, scene.poses[frame])
    return rasterize_gbuffer(cam, gset, scene.body.colors.reshape(-1, 3))


def render(scene, frame: int, mode: str = "lit", camera_index: int = 0,
           light: DirectionalLight | None = None, gbuffer: GBuffer | None = None,
           n_threads: int | None = None) -> np.ndarray:
    """Render one frame. ``lit`` is pre-tonemap HDR; other modes dump a buffer."""
    from .body import posed_set

    if mode not in MODES:
        raise UsageError(f"unknown render mode {mode!r}; expected one of {', '.join(MODES)}")
    if not 0 <= frame < len(scene.poses):
        raise UsageError(f"frame {frame} out of range (scene has {len(scene.poses)})")
    cam = scene.cameras[camera_index]
    gb = gbuffer if gbuffer is not None else frame_gbuffer(scene, frame, camera_index)
    fg = gb.foreground
    if mode == "albedo":
        return np.where(fg[..., None], gb.albedo, 0.0)
    if mode == "normal":
        return np.where(fg[..., None], np.nan_to_num(gb.normal), 0.0)
    if mode == "depth":
        return np.where(fg, np.nan_to_num(gb.depth, nan=0.0, posinf=0.0), 0.0)
    light = light if light is not None else scene.light
    gset = posed_set(scene.body, scene.skeleton, scene.poses[frame])
    sm = shadow_map(gb, cam, gset, light, scene.shadow_bias, n_threads)
    if mode == "shadow":
        return sm.values
    lit = shade_pixel(gb.albedo, np.nan_to_num(gb.normal), sm.values, light)
    if scene.ground_plane is not None:
        bg = ground_shadow(scene.ground_plane, gset, light, cam, gb, n_threads)
    else:
        bg = np.broadcast_to(scene.background, lit.shape)
    return np.where(fg[..., None], lit, bg)
