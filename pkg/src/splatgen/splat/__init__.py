"""Differentiable 3D Gaussian splatting."""

from .backend import available_backends, backend_name, get_kernels
from .bridge import render_torch
from .cloud import GaussianCloud, empty_cloud, load_ply, save_ply
from .project import covariance_from, project_gaussian, quat_rotmats
from .render import RenderOutput, render, render_arrays, render_backward

__all__ = [
    "available_backends", "backend_name", "get_kernels", "render_torch",
    "GaussianCloud", "empty_cloud", "load_ply", "save_ply",
    "covariance_from", "project_gaussian", "quat_rotmats",
    "RenderOutput", "render", "render_arrays", "render_backward",
]
