"""Splat-based inverse rendering on the CPU.

Pipeline stages: fit Gaussians with depth-regularized normals from posed
images, bake occlusion and indirect-light volumes into spherical-harmonics
grids, then decompose materials and environment lighting with split-sum
physically-based shading. Every differentiable path ships with an analytic
backward pass.
"""

__version__ = "0.1.0"

from .cameras import Camera, look_at
from .gaussians import GaussianCloud, covariance_3d, project_gaussian
from .rasterizer import FrameBuffers, rasterize_backward, rasterize_forward, render_depth
from .sh import sh_eval

__all__ = [
    "Camera",
    "FrameBuffers",
    "GaussianCloud",
    "covariance_3d",
    "look_at",
    "project_gaussian",
    "rasterize_backward",
    "rasterize_forward",
    "render_depth",
    "sh_eval",
]
