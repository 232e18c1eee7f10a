"""splatgen: toy text-to-3D generation pipeline.

Three stages: a diffusion transformer samples camera trajectories from a
prompt class, a multi-view latent diffusion model generates pixel-aligned
3D Gaussians along a sparse subset of those cameras, and a score-distillation
refinement loop sharpens the result against a 2D diffusion prior.
"""

__version__ = "0.1.0"
