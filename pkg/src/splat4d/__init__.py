"""Pruning, temporal filtering and compression tools for 4D Gaussian splatting scenes."""

from .core import (
    ConditionalGaussian3D,
    Gaussian4D,
    Scene4D,
    condition_at_time,
    covariance4d,
    from_motion,
    rotor_to_matrix,
    so4_to_isoclinic,
    temporal_opacity,
    temporal_opacity_d2,
)
from .analysis import psnr, sigma_t_histogram, ssim
from .raster import Camera, RenderFrame, evaluate_sh, project, rasterize, reference_render
from .scene_io import load_scene, save_scene
from .scoring import prune, score_table
from .synth import SceneSpec, generate_scene
from .temporal_filter import KeyframeMaskSet, active_set, build_masks, filtered_render, select_keyframes

__all__ = [
    "Camera",
    "ConditionalGaussian3D",
    "Gaussian4D",
    "KeyframeMaskSet",
    "RenderFrame",
    "Scene4D",
    "SceneSpec",
    "active_set",
    "build_masks",
    "condition_at_time",
    "covariance4d",
    "evaluate_sh",
    "filtered_render",
    "from_motion",
    "generate_scene",
    "load_scene",
    "project",
    "prune",
    "psnr",
    "rasterize",
    "reference_render",
    "rotor_to_matrix",
    "save_scene",
    "score_table",
    "select_keyframes",
    "sigma_t_histogram",
    "so4_to_isoclinic",
    "ssim",
    "temporal_opacity",
    "temporal_opacity_d2",
]
