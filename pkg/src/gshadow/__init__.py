"""Analytic shadow casting through articulated anisotropic Gaussian bodies."""

from .gaussian_core import (
    AnisoGaussian,
    GaussianSet,
    InvalidParameterError,
    Ray,
    RayGaussian1D,
    density_at,
    reduce_to_1d,
    segment_integral,
    transmittance,
)
from .kernels import BACKEND, sampled_transmittance_batch, transmittance_batch
from .body import GaussianBody, InvalidInputError, PoseFrame, Skeleton, init_body, posed_set
from .fit import FitConfig, OptimizationError, VoxelField, fit
from .shading import (
    Camera,
    DirectionalLight,
    EnvironmentMap,
    GBuffer,
    GroundPlane,
    relight_hdri,
    render,
    shadow_map,
)
from .light import LightParams, SolveConfig, solve
from .scene import Scene, SceneError, load_scene, save_scene
from .metrics import psnr
from .bench import BenchReport, bench_shadows

__version__ = "0.1.0"

__all__ = [
    "AnisoGaussian", "GaussianSet", "InvalidParameterError", "Ray", "RayGaussian1D",
    "density_at", "reduce_to_1d", "segment_integral", "transmittance",
    "BACKEND", "sampled_transmittance_batch", "transmittance_batch",
    "GaussianBody", "InvalidInputError", "PoseFrame", "Skeleton", "init_body", "posed_set",
    "FitConfig", "OptimizationError", "VoxelField", "fit",
    "Camera", "DirectionalLight", "EnvironmentMap", "GBuffer", "GroundPlane",
    "relight_hdri", "render", "shadow_map",
    "LightParams", "SolveConfig", "solve",
    "Scene", "SceneError", "load_scene", "save_scene",
    "psnr", "BenchReport", "bench_shadows",
]
