"""Training steps for the multi-view latent diffusion model.

Per step and scene: encode the sparse views with the frozen autoencoder,
noise the (standardized) latents at a random timestep, denoise, and take
two losses — the latent x0-prediction error and the image-space error of
the decoded Gaussian cloud rendered at randomly drawn dense views. The
total loss is exactly their sum. Single-view batches run the identical
machinery with one view and the identity camera.
"""

import numpy as np
import torch
import torch.nn.functional as F

from ..cameras import default_camera
from ..diffusion import add_noise
from ..errors import ConfigError
from ..nncore import Adam, ConditionTable
from ..splat import render_torch
from .model import GMLDM, gaussian_features, gaussians_from_features


def sparse_indices(m: int, n: int):
    """n near-uniform indices into [0, m), endpoints included, increasing."""
    if n > m:
        raise ConfigError(f"cannot pick {n} sparse views from {m} dense views")
    if n == 1:
        return [0]
    return [(2 * i * (m - 1) + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def _frames_tensor(frames, idx=None):
    arr = frames if idx is None else frames[idx]
    return torch.as_tensor(arr, dtype=torch.float32).permute(0, 3, 1, 2)


def _scene_losses(model: GMLDM, scene, generator, perceptual=None):
    cfg = model.config
    m = len(scene.trajectory)
    idx = sparse_indices(m, min(cfg.sparse_views, m))
    cams = [scene.trajectory[i] for i in idx]
    images = _frames_tensor(scene.frames, idx)

    with torch.no_grad():
        z_raw = model.autoencoder.encode(images)
    z = model.standardize(z_raw)
    t = int(torch.randint(1, cfg.timesteps + 1, (1,), generator=generator))
    eps = torch.randn(z.shape, generator=generator)
    z_t = add_noise(z, eps, t, model.schedule)

    dropped = float(torch.rand((), generator=generator)) < cfg.null_cond_prob
    cid = ConditionTable.NULL_CLASS if dropped else scene.class_id
    cond = model.embed_classes([cid])
    rays = model.ray_maps(cams, cfg.latent_size)[None]
    z_hat, feats = model.denoiser(z_t[None], rays, torch.tensor([t]), cond)
    loss_2d = F.mse_loss(z_hat[0], z)

    raw = model.decode_raw_gaussians(z_hat, feats)
    act = gaussian_features(raw[0], cfg.depth_near, cfg.depth_far)
    gauss = gaussians_from_features(act, cams, cfg.image_size)

    n_sup = min(cfg.supervision_views, m)
    sup = torch.randperm(m, generator=generator)[:n_sup].tolist()
    loss_3d = 0.0
    for j in sup:
        rgb, _, _ = render_torch(
            gauss["mu"], gauss["q"], gauss["s"], gauss["alpha"], gauss["colors"],
            scene.trajectory[j], (cfg.image_size, cfg.image_size),
        )
        target = torch.as_tensor(scene.frames[j], dtype=torch.float32)
        loss_3d = loss_3d + F.mse_loss(rgb, target)
        if perceptual is not None:
            loss_3d = loss_3d + perceptual(rgb, target)
    loss_3d = loss_3d / n_sup
    return loss_2d, loss_3d


def training_step(model: GMLDM, batch, opt: Adam, generator, perceptual=None):
    """One optimizer step over a batch of scenes; returns the loss parts.

    ``perceptual`` is an optional pluggable image-space term (disabled by
    default; the reconstruction loss is plain MSE).
    """
    if not batch:
        raise ConfigError("empty scene batch")
    loss_2d = loss_3d = 0.0
    for scene in batch:
        l2, l3 = _scene_losses(model, scene, generator, perceptual)
        loss_2d = loss_2d + l2
        loss_3d = loss_3d + l3
    loss_2d = loss_2d / len(batch)
    loss_3d = loss_3d / len(batch)
    loss = loss_2d + loss_3d  # exactly the sum, no hidden weighting
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {"loss": float(loss.detach()), "loss_2d": float(loss_2d.detach()), "loss_3d": float(loss_3d.detach())}


class _SingleViewScene:
    """Adapter: one image + the identity camera as an M = N = 1 scene."""

    def __init__(self, image, class_id):
        from ..cameras import Trajectory

        self.trajectory = Trajectory([default_camera()])
        self.frames = np.asarray(image, dtype=np.float32)[None]
        self.class_id = class_id


def single_view_step(model: GMLDM, images, class_ids, opt: Adam, generator):
    """Co-training step on single images (list of (H, W, 3) arrays)."""
    batch = [_SingleViewScene(img, cid) for img, cid in zip(images, class_ids)]
    return training_step(model, batch, opt, generator)


def train_gmldm(model: GMLDM, scenes, steps, *, batch_size=2, generator,
                opt=None, single_images=None, log_every=50, verbose=False):
    """Overfit/training loop; returns (opt, history rows).

    ``single_images`` is an optional list of (image, class_id) pairs mixed
    in with probability ``config.single_view_prob``.
    """
    if not scenes:
        raise ConfigError("empty dataset")
    for scene in scenes:
        if not scene.trajectory.is_normalized() and len(scene.trajectory) > 1:
            raise ConfigError("dataset contains a non-normalized trajectory")
    trainable = {
        n: p for n, p in model.named_parameters() if not n.startswith("autoencoder.")
    }
    opt = opt or Adam(trainable, lr=model.config.lr)
    history = []
    for step in range(steps):
        use_single = (
            single_images
            and float(torch.rand((), generator=generator)) < model.config.single_view_prob
        )
        if use_single:
            pick = torch.randint(0, len(single_images), (1,), generator=generator)
            img, cid = single_images[int(pick)]
            parts = single_view_step(model, [img], [cid], opt, generator)
        else:
            idx = torch.randperm(len(scenes), generator=generator)[:batch_size]
            parts = training_step(model, [scenes[i] for i in idx.tolist()], opt, generator)
        history.append({"step": opt.step_count, **parts})
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(
                f"step {opt.step_count} loss {parts['loss']:.5f} "
                f"(2d {parts['loss_2d']:.5f}, 3d {parts['loss_3d']:.5f})"
            )
    return opt, history
