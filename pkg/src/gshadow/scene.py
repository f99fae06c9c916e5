"""Scene files (JSON) and the bundled stick-figure scene.

Schema (version 1, all angles in radians, all lengths in meters)::

    {
      "version": 1,
      "skeleton": {"J": int, "parents": [int], "rest_centers": [[x, y, z]]},
      "body": {"K": int, "parameters": J x K x 13, "colors": J x K x 3 (optional)},
      "poses": [{"frame": int, "transforms": J x 4 x 4}],
      "cameras": [{"fx", "fy", "cx", "cy", "width", "height", "world_to_camera": 4 x 4}],
      "light": {"azimuth", "elevation", "ambient": [r, g, b], "color": [r, g, b]},
      "env_map": "path.pfm" (optional),
      "ground_plane": {"point", "normal", "background": [r, g, b] | "image path"} (optional),
      "gbuffer_source": {"type": "analytic"} | {"type": "files", "dir": "path"} (optional),
      "shadow_bias": float (optional, default 0.02),
      "background": [r, g, b] (optional, default black)
    }

Relative paths resolve against the scene file's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import GaussianBody, PoseFrame, Skeleton, axis_angle, rigid_transform
from .imageio import read_image, read_pfm
from .shading import (
    DEFAULT_BIAS,
    Camera,
    DirectionalLight,
    EnvironmentMap,
    GroundPlane,
    angles_from_direction,
)

SCHEMA_VERSION = 1
BUNDLED_SCENE = Path(__file__).parent / "data" / "stick_figure.json"


class SceneError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.field_path = path


@dataclass(eq=False)
class Scene:
    skeleton: Skeleton
    body: GaussianBody
    poses: list[PoseFrame]
    cameras: list[Camera]
    light: DirectionalLight
    env_map: EnvironmentMap | None = None
    env_map_path: str | None = None
    ground_plane: GroundPlane | None = None
    ground_background_path: str | None = None
    gbuffer_source: dict = field(default_factory=lambda: {"type": "analytic"})
    shadow_bias: float = DEFAULT_BIAS
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_dir: Path = field(default_factory=Path.cwd)


# ---------------------------------------------------------------------------
# parsing helpers


def _get(d: dict, key: str, path: str):
    if not isinstance(d, dict) or key not in d:
        raise SceneError(f"{path}.{key}" if path else key, "missing field")
    return d[key]


def _array(value, shape, path: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SceneError(path, f"not a numeric array ({exc})") from None
    if shape is not None and a.shape != tuple(shape):
        raise SceneError(path, f"expected shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SceneError(path, "values must be finite")
    return a


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SceneError(path, f"expected a finite number, got {value!r}")
    return float(value)


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneError(path, f"expected an integer, got {value!r}")
    return value


def _wrap(path: str, fn, *args):
    try:
        return fn(*args)
    except SceneError:
        raise
    except (ValueError, ArithmeticError) as exc:
        raise SceneError(path, str(exc)) from None


def scene_from_dict(doc: dict, base_dir: Path | str = ".") -> Scene:
    base_dir = Path(base_dir)
    if not isinstance(doc, dict):
        raise SceneError("", "scene must be a JSON object")
    version = _get(doc, "version", "")
    if isinstance(version, bool) or not isinstance(version, int) or version != SCHEMA_VERSION:
        raise SceneError("version", f"unsupported scene version {version!r} (expected {SCHEMA_VERSION})")

    sk = _get(doc, "skeleton", "")
    j = _int(_get(sk, "J", "skeleton"), "skeleton.J")
    parents = _get(sk, "parents", "skeleton")
    if not isinstance(parents, list) or len(parents) != j:
        raise SceneError("skeleton.parents", f"expected {j} parent indices")
    parents = [_int(p, f"skeleton.parents[{i}]") for i, p in enumerate(parents)]
    centers = _array(_get(sk, "rest_centers", "skeleton"), (j, 3), "skeleton.rest_centers")
    skeleton = _wrap("skeleton", Skeleton, tuple(parents), centers)

    bd = _get(doc, "body", "")
    k = _int(_get(bd, "K", "body"), "body.K")
    if k < 1:
        raise SceneError("body.K", "must be >= 1")
    raw = _get(bd, "parameters", "body")
    params = _array(raw, None, "body.parameters")
    if params.size != j * k * 13:
        raise SceneError("body.parameters", f"expected {j}x{k}x13 = {j * k * 13} values, got {params.size}")
    params = params.reshape(j, k, 13)
    colors = None
    if "colors" in bd:
        colors = _array(bd["colors"], (j, k, 3), "body.colors")
    body = _wrap("body.parameters", GaussianBody, params, colors)

    poses_doc = _get(doc, "poses", "")
    if not isinstance(poses_doc, list) or not poses_doc:
        raise SceneError("poses", "need at least one pose frame")
    poses = []
    for i, p in enumerate(poses_doc):
        path = f"poses[{i}]"
        t = _array(_get(p, "transforms", path), (j, 4, 4), f"{path}.transforms")
        frame = _int(p.get("frame", i), f"{path}.frame")
        poses.append(_wrap(path, PoseFrame, t, frame))

    cams_doc = _get(doc, "cameras", "")
    if not isinstance(cams_doc, list) or not cams_doc:
        raise SceneError("cameras", "need at least one camera")
    cameras = []
    for i, c in enumerate(cams_doc):
        path = f"cameras[{i}]"
        vals = {key: _number(_get(c, key, path), f"{path}.{key}") for key in ("fx", "fy", "cx", "cy")}
        w = _int(_get(c, "width", path), f"{path}.width")
        h = _int(_get(c, "height", path), f"{path}.height")
        m = _array(_get(c, "world_to_camera", path), (4, 4), f"{path}.world_to_camera")
        cameras.append(_wrap(path, Camera, vals["fx"], vals["fy"], vals["cx"], vals["cy"], w, h, m))

    ld = _get(doc, "light", "")
    az = _number(_get(ld, "azimuth", "light"), "light.azimuth")
    el = _number(_get(ld, "elevation", "light"), "light.elevation")
    if not -math.pi / 2 <= el <= math.pi / 2:
        raise SceneError("light.elevation", "must lie in [-pi/2, pi/2]")
    amb = _array(ld.get("ambient", [0.1, 0.1, 0.1]), (3,), "light.ambient")
    col = _array(ld.get("color", [1.5, 1.5, 1.5]), (3,), "light.color")
    light = DirectionalLight.from_angles(az, el, amb, col)

    env, env_path = None, doc.get("env_map")
    if env_path is not None:
        p = base_dir / env_path
        if not p.is_file():
            raise SceneError("env_map", f"file not found: {p}")
        env = _wrap("env_map", EnvironmentMap, read_pfm(p))

    plane, bg_path = None, None
    if doc.get("ground_plane") is not None:
        gp = doc["ground_plane"]
        point = _array(_get(gp, "point", "ground_plane"), (3,), "ground_plane.point")
        normal = _array(_get(gp, "normal", "ground_plane"), (3,), "ground_plane.normal")
        if np.linalg.norm(normal) == 0:
            raise SceneError("ground_plane.normal", "must be non-zero")
        bg = gp.get("background", [0.5, 0.5, 0.5])
        if isinstance(bg, str):
            p = base_dir / bg
            if not p.is_file():
                raise SceneError("ground_plane.background", f"file not found: {p}")
            bg_path = bg
            bg = read_image(p)
        else:
            bg = _array(bg, (3,), "ground_plane.background")
        plane = GroundPlane(point, normal, bg)

    src = dict(doc.get("gbuffer_source") or {"type": "analytic"})
    if src.get("type") not in ("analytic", "files"):
        raise SceneError("gbuffer_source.type", f"unknown G-buffer source {src.get('type')!r}")
    if src["type"] == "files":
        d = base_dir / _get(src, "dir", "gbuffer_source")
        if not d.is_dir():
            raise SceneError("gbuffer_source.dir", f"directory not found: {d}")
        src["dir"] = str(d)

    bias = _number(doc.get("shadow_bias", DEFAULT_BIAS), "shadow_bias")
    background = _array(doc.get("background", [0.0, 0.0, 0.0]), (3,), "background")
    return Scene(skeleton, body, poses, cameras, light, env, env_path, plane, bg_path, src,
                 bias, background, base_dir)


def scene_to_dict(scene: Scene) -> dict:
    az, el = angles_from_direction(scene.light.direction)
    doc = {
        "version": SCHEMA_VERSION,
        "skeleton": {
            "J": scene.skeleton.joint_count,
            "parents": list(scene.skeleton.parents),
            "rest_centers": scene.skeleton.rest_centers.tolist(),
        },
        "body": {
            "K": scene.body.k,
            "parameters": scene.body.params.tolist(),
            "colors": scene.body.colors.tolist(),
        },
        "poses": [{"frame": p.timestamp, "transforms": p.transforms.tolist()} for p in scene.poses],
        "cameras": [
            {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
             "world_to_camera": c.world_to_camera.tolist()}
            for c in scene.cameras
        ],
        "light": {
            "azimuth": az,
            "elevation": el,
            "ambient": scene.light.ambient.tolist(),
            "color": scene.light.color.tolist(),
        },
        "shadow_bias": scene.shadow_bias,
        "background": np.asarray(scene.background).tolist(),
    }
    if scene.env_map_path is not None:
        doc["env_map"] = scene.env_map_path
    if scene.ground_plane is not None:
        gp = scene.ground_plane
        doc["ground_plane"] = {
            "point": gp.point.tolist(),
            "normal": gp.normal.tolist(),
            "background": scene.ground_background_path or np.asarray(gp.background).tolist(),
        }
    src = dict(scene.gbuffer_source)
    if src.get("type") == "files":
        d = Path(src["dir"])
        try:
            src["dir"] = str(d.relative_to(scene.base_dir))
        except ValueError:
            src["dir"] = str(d)
    doc["gbuffer_source"] = src
    return doc


def load_scene(path=None) -> Scene:
    """Load a scene file; without a path, the bundled stick figure."""
    p = Path(path) if path is not None else BUNDLED_SCENE
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError("", f"invalid JSON: {exc}") from None
    return scene_from_dict(doc, p.parent)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


# ---------------------------------------------------------------------------
# bundled synthetic scene

JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
_PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
_REST = (
    (0.0, 1.00, 0.0), (0.0, 1.20, 0.0), (0.0, 1.42, 0.0), (0.0, 1.62, 0.0),
    (0.18, 1.45, 0.0), (0.45, 1.45, 0.0), (0.70, 1.45, 0.0),
    (-0.18, 1.45, 0.0), (-0.45, 1.45, 0.0), (-0.70, 1.45, 0.0),
    (0.10, 0.95, 0.0), (0.10, 0.58, 0.0), (0.10, 0.20, 0.0),
    (-0.10, 0.95, 0.0), (-0.10, 0.58, 0.0), (-0.10, 0.20, 0.0),
)
# thickness (perpendicular std, m) and albedo per joint
_THICK = (0.10, 0.10, 0.11, 0.08, 0.045, 0.04, 0.035, 0.045, 0.04, 0.035, 0.06, 0.05, 0.045, 0.06, 0.05, 0.045)
_SHIRT, _SKIN, _PANTS = (0.30, 0.40, 0.80), (0.85, 0.68, 0.56), (0.35, 0.32, 0.28)
_COLOR = (_PANTS, _SHIRT, _SHIRT, _SKIN, _SHIRT, _SKIN, _SKIN, _SHIRT, _SKIN, _SKIN,
          _PANTS, _PANTS, _PANTS, _PANTS, _PANTS, _PANTS)
# optical depth straight through a limb
_LIMB_DEPTH = 4.0


def _stick_body(skeleton: Skeleton, k: int) -> GaussianBody:
    params = np.zeros((skeleton.joint_count, k, 13))
    colors = np.zeros((skeleton.joint_count, k, 3))
    frac = (np.arange(k) + 0.5) / k
    for j in range(skeleton.joint_count):
        a, b = skeleton.bone_segment(j)
        axis = b - a
        length = np.linalg.norm(axis)
        axis = axis / length
        perp = np.cross(axis, [0.0, 0.0, 1.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(axis, [1.0, 0.0, 0.0])
        perp /= np.linalg.norm(perp)
        thick = _THICK[j]
        along = max(0.6 * length / k, thick)
        params[j, :, 0:3] = (a[None] + frac[:, None] * (b - a)[None]) - skeleton.rest_centers[j]
        params[j, :, 3:6] = (along, thick, thick)
        params[j, :, 6:9] = axis
        params[j, :, 9:12] = perp
        params[j, :, 12] = _LIMB_DEPTH / (thick * math.sqrt(2 * math.pi))
        colors[j] = _COLOR[j]
    return GaussianBody(params, colors)


def _forward_kinematics(skeleton: Skeleton, local_rots: dict[int, np.ndarray], root_offset=(0, 0, 0)):
    world = np.zeros((skeleton.joint_count, 4, 4))
    for j, p in enumerate(skeleton.parents):
        rot = local_rots.get(j, np.eye(3))
        if p < 0:
            world[j] = rigid_transform(rot, skeleton.rest_centers[j] + np.asarray(root_offset))
        else:
            offset = skeleton.rest_centers[j] - skeleton.rest_centers[p]
            world[j] = world[p] @ rigid_transform(rot, offset)
    return world


def _stick_poses(skeleton: Skeleton, n_frames: int) -> list[PoseFrame]:
    x, y, z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    poses = []
    for f in range(n_frames):
        ph = 2 * math.pi * f / n_frames
        s, c = math.sin(ph), math.cos(ph)
        rots = {
            0: axis_angle(y, 0.25 * s),
            1: axis_angle(x, 0.08 * c),
            4: axis_angle(z, -1.0 + 0.5 * s) @ axis_angle(y, 0.5 * c),
            5: axis_angle(y, 0.6 + 0.4 * s),
            7: axis_angle(z, 1.0 - 0.4 * c) @ axis_angle(y, -0.7 * s),
            8: axis_angle(y, -0.5 - 0.4 * c),
            10: axis_angle(x, 0.45 * s),
            11: axis_angle(x, -0.3 - 0.3 * c),
            13: axis_angle(x, -0.45 * s),
            14: axis_angle(x, -0.3 + 0.3 * c),
        }
        poses.append(PoseFrame(_forward_kinematics(skeleton, rots), f))
    return poses


def stick_figure_scene(n_frames: int = 8, resolution: int = 96, k: int = 4) -> Scene:
    """The 16-joint test figure: three cameras 90 degrees apart, sun from the upper front."""
    skeleton = Skeleton(_PARENTS, np.array(_REST))
    body = _stick_body(skeleton, k)
    poses = _stick_poses(skeleton, n_frames)
    target = (0.0, 0.9, 0.0)
    cameras = []
    for ang in (0.0, math.pi / 2, math.pi):
        eye = (3.2 * math.sin(ang), 1.1, 3.2 * math.cos(ang))
        cameras.append(Camera.looking_at(eye, target, resolution, resolution, fov_y_deg=40.0))
    light = DirectionalLight.from_angles(0.6, 0.9, (0.1, 0.1, 0.1))
    plane = GroundPlane((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.62, 0.6, 0.55))
    return Scene(skeleton, body, poses, cameras, light, ground_plane=plane)
