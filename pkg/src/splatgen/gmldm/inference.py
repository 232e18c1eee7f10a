"""Dual-mode DDIM inference: 2D-based and rendering-based denoising.

Most steps denoise the multi-view latents directly (2D mode, strong CFG).
Every ``render_interval``-th step counting back from the final one instead
decodes a single Gaussian cloud, renders it at the sparse cameras and
encodes those renders as the clean-latent prediction — the per-view
predictions are then 3D-consistent by construction, because they are
renders of one shared cloud. The cloud from the final (rendering-based)
step is the generated scene.
"""

import numpy as np
import torch

from ..diffusion import cfg_combine, ddim_step, inference_timesteps
from ..errors import ConfigError
from ..nncore import ConditionTable
from ..splat import GaussianCloud, render
from .model import GMLDM, gaussian_features, gaussians_from_features
from .train import sparse_indices


def step_modes(num_steps: int, interval: int = 10):
    """Denoising mode per step index: every interval-th step counting back
    from the last is rendering-based, so the final step always is.
    """
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    return [
        "render" if (num_steps - 1 - i) % interval == 0 else "2d"
        for i in range(num_steps)
    ]


def denoise_multiview(model: GMLDM, z_t_std, cams, class_id, t):
    """x0-prediction (standardized space) plus auxiliary features.

    z_t_std: (N, c, h, w) noisy latents with ray maps added inside.
    """
    if len(cams) != z_t_std.shape[0]:
        raise ConfigError(
            f"{len(cams)} cameras for {z_t_std.shape[0]} latent views"
        )
    rays = model.ray_maps(cams, model.config.latent_size, dtype=z_t_std.dtype)
    cond = model.embed_classes([class_id])
    z_hat, feats = model.denoiser(
        z_t_std[None], rays[None], torch.tensor([t]), cond
    )
    return z_hat[0], feats[0]


def _guided_x0(model, z_t, cams, class_id, t, omega):
    z_c, feats = denoise_multiview(model, z_t, cams, class_id, t)
    if omega == 1.0:
        return z_c, feats
    z_u, _ = denoise_multiview(model, z_t, cams, ConditionTable.NULL_CLASS, t)
    return cfg_combine(z_c, z_u, omega), feats


def decode_gaussians(model: GMLDM, z_hat_std, feats, cams):
    """Denoised latents + features -> one pixel-aligned cloud (torch dict)."""
    cfg = model.config
    raw = model.decode_raw_gaussians(z_hat_std[None], feats[None])
    act = gaussian_features(raw[0], cfg.depth_near, cfg.depth_far)
    return gaussians_from_features(act, cams, cfg.image_size)


def cloud_from_tensors(gauss) -> GaussianCloud:
    to = lambda v: v.detach().cpu().numpy()
    return GaussianCloud(
        to(gauss["mu"]), to(gauss["q"]), to(gauss["s"]), to(gauss["alpha"]),
        to(gauss["colors"])[:, None, :],
    )


def rendering_based_step(model: GMLDM, z_t_std, cams, class_id, t, omega=None):
    """Gaussian-driven denoising: decode a cloud, render it at the sparse
    cameras, re-encode the renders as the x0 prediction.

    Returns (z_hat_G (standardized), gauss tensors, renders (N, 3, H, W)).
    """
    cfg = model.config
    omega = cfg.cfg_render if omega is None else omega
    z_hat, feats = _guided_x0(model, z_t_std, cams, class_id, t, omega)
    gauss = decode_gaussians(model, z_hat, feats, cams)
    cloud = cloud_from_tensors(gauss)
    frames = [
        render(cloud, cam, (cfg.image_size, cfg.image_size)).rgb for cam in cams
    ]
    renders = torch.as_tensor(
        np.stack(frames), dtype=z_t_std.dtype
    ).permute(0, 3, 1, 2)
    with torch.no_grad():
        z_g = model.standardize(model.autoencoder.encode(renders))
    return z_g, gauss, renders


def generate_scene(model: GMLDM, trajectory, class_id, num_steps=100,
                   generator=None, trace=None):
    """Full DDIM chain from unit Gaussian latents to a GaussianCloud.

    ``trace``, if a list, collects (step index, t, mode) tuples plus the
    intermediate x0 predictions for inspection.
    """
    cfg = model.config
    m = len(trajectory)
    cams = [trajectory[i] for i in sparse_indices(m, min(cfg.sparse_views, m))]
    c_lat = model.autoencoder.latent_channels
    shape = (len(cams), c_lat, cfg.latent_size, cfg.latent_size)
    ts = inference_timesteps(model.schedule.T, num_steps)
    modes = step_modes(num_steps, cfg.render_interval)
    cloud = None
    with torch.no_grad():
        z = torch.randn(shape, generator=generator)
        for i in range(num_steps):
            t, t_prev = ts[i], ts[i + 1]
            if modes[i] == "2d":
                x0, _ = _guided_x0(model, z, cams, class_id, t, cfg.cfg_2d)
            else:
                x0, gauss, _ = rendering_based_step(model, z, cams, class_id, t)
                cloud = cloud_from_tensors(gauss)
            if trace is not None:
                trace.append({"step": i, "t": t, "mode": modes[i], "x0": x0.clone()})
            z = ddim_step(z, x0, t, t_prev, model.schedule)
    return cloud
