"""Score-distillation refinement of a Gaussian cloud.

Per iteration: render the cloud at a camera sampled uniformly from the
continuously interpolated trajectory, encode the image, noise it at an
annealed timestep, and assemble a compositional noise prediction

    eps_hat = eps_target - eps_source + eps

where the target uses classifier-free guidance and the source comes from a
learnable embedding trained online to predict the drawn noise. The noise
prediction is converted to a clean-latent reconstruction target (and its
decoded image); both targets are constants, so gradients reach the cloud
only through the rendered image and its latent. Gaussian parameter groups
take Adam steps at their own learning rates; the source embedding is
updated solely by its own objective.

The 2D prior is anything implementing ``predict_x0 / encode_image /
decode_latent / embed``: the bundled toy single-view latent diffusion model
(:class:`Ldm2D`), or a trained multi-view model adapted through
:class:`GMLDMPrior`.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import interpolate_camera
from .checkpoint import arrays_to_module, load_checkpoint, module_to_arrays, save_checkpoint
from .diffusion import add_noise, cfg_combine, eps_from_x0, make_schedule, x0_from_eps
from .errors import ConfigError
from .gmldm.autoencoder import make_autoencoder
from .gmldm.model import GMLDM, MultiViewDenoiser
from .nncore import Adam, ConditionTable
from .splat import GaussianCloud, render_torch


@dataclass
class RefinerConfig:
    lambda_z: float = 1.0
    lambda_x: float = 0.01
    omega_cfg: float = 7.5
    iterations: int = 1000
    t_start_frac: float = 0.75
    t_end_frac: float = 0.02
    lr_mu: float = 1e-4
    lr_q: float = 1e-2
    lr_s: float = 1e-3
    lr_alpha: float = 1e-2
    lr_color: float = 1e-2
    lr_source: float = 1e-3
    render_size: int = 0  # 0 -> twice the prior's native image size
    weight_fn: object = None  # optional w(t) hook; default is constant 1

    def validate(self):
        if self.lambda_z < 0 or self.lambda_x < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < self.t_end_frac < self.t_start_frac <= 1:
            raise ConfigError("need 0 < t_end < t_start <= T")


def anneal_timestep(iteration, total, T, start_frac=0.75, end_frac=0.02):
    """Square-root annealing from start_frac*T down to end_frac*T."""
    if not 0 <= iteration <= total:
        raise ConfigError("iteration outside [0, total]")
    t_start = start_frac * T
    t_end = end_frac * T
    t = t_end + (t_start - t_end) * (1.0 - np.sqrt(iteration / total))
    return int(round(t))


def compose_epsilon(eps_trg, eps_src, eps):
    """Compositional noise prediction: target - source + true noise."""
    return eps_trg - eps_src + eps


def target_prediction(prior, z_t, cond_seq, t, omega):
    """CFG-guided noise prediction toward the prompt condition.

    omega == 1 returns the conditional prediction bit-exactly.
    """
    eps_c = _predict_eps(prior, z_t, cond_seq, t)
    if omega == 1.0:
        return eps_c
    null_seq = prior.embed([ConditionTable.NULL_CLASS])
    eps_u = _predict_eps(prior, z_t, null_seq, t)
    return cfg_combine(eps_c, eps_u, omega)


def _predict_eps(prior, z_t, cond_seq, t, camera=None):
    x0 = prior.predict_x0(z_t, cond_seq, torch.tensor([t]), camera=camera)
    return eps_from_x0(z_t, x0, t, prior.schedule)


def source_update(prior, z_t, t, eps, y_hat, opt, camera=None):
    """One gradient step on the learnable source embedding only.

    A prior whose prediction does not depend on the embedding (stub models,
    zero-initialized condition paths) makes this a no-op.
    """
    eps_pred = _predict_eps(prior, z_t.detach(), y_hat[None], t, camera=camera)
    loss = F.mse_loss(eps_pred, eps)
    if loss.requires_grad:
        opt.zero_grad()
        loss.backward()
        opt.step()
        opt.zero_grad()  # leave no residue: the SDS loss must never touch y_hat
    return float(loss.detach())


def _sds_terms(prior, x, z, t, eps, cond_seq, y_hat, config, camera=None):
    """Loss given the differentiable render x (1,3,H,W) and latent z."""
    z_t = add_noise(z.detach(), eps, t, prior.schedule)
    with torch.no_grad():
        eps_trg = target_prediction(prior, z_t, cond_seq, t, config.omega_cfg)
        eps_src = _predict_eps(prior, z_t, y_hat[None], t, camera=camera)
        eps_hat = compose_epsilon(eps_trg, eps_src, eps)
        z_hat = x0_from_eps(z_t, eps_hat, t, prior.schedule)
        x_hat = prior.decode_latent(z_hat)
    ab = prior.schedule.alpha_bar[t]
    w = 1.0 if config.weight_fn is None else float(config.weight_fn(t))
    coef = w * np.sqrt(ab) / np.sqrt(max(1.0 - ab, 1e-12))
    loss_z = F.mse_loss(z, z_hat)
    loss_x = F.mse_loss(x, x_hat)
    loss = coef * (config.lambda_z * loss_z + config.lambda_x * loss_x)
    return loss, {
        "loss_z": float(loss_z.detach()),
        "loss_x": float(loss_x.detach()),
        "z_t": z_t,
    }


def _render_latent(params, camera, prior, size):
    rgb, _, _ = render_torch(
        params["mu"], params["q"], params["s"], params["alpha"], params["colors"],
        camera, (size, size),
    )
    x = rgb.permute(2, 0, 1)[None]
    z = prior.encode_image(x)
    return x, z


def sds_pp_loss(params, camera, prior, cond_seq, y_hat, t, eps, config):
    """Self-contained SDS++ loss for a cloud at one camera.

    ``params`` holds torch tensors (mu, q, s, alpha, colors); the returned
    scalar backpropagates into them through the rasterizer and encoder only
    (the reconstruction targets are constants).
    """
    size = config.render_size or 2 * prior.image_size
    x, z = _render_latent(params, camera, prior, size)
    loss, parts = _sds_terms(prior, x, z, t, eps, cond_seq, y_hat, config, camera=camera)
    parts.pop("z_t")
    return loss, parts


def cloud_to_params(cloud: GaussianCloud, requires_grad=True):
    to = lambda a: torch.tensor(np.asarray(a, dtype=np.float32), requires_grad=requires_grad)
    return {
        "mu": to(cloud.mu), "q": to(cloud.q), "s": to(cloud.s),
        "alpha": to(cloud.alpha), "colors": to(cloud.colors),
    }


def params_to_cloud(params) -> GaussianCloud:
    to = lambda v: v.detach().numpy().copy()
    return GaussianCloud(
        to(params["mu"]), to(params["q"]), to(params["s"]), to(params["alpha"]),
        to(params["colors"])[:, None, :],
    )


def refine(cloud: GaussianCloud, trajectory, prior, class_id, config: RefinerConfig,
           generator=None, log_fn=None, use_camera_conditioning=False):
    """Run the full refinement loop; returns the refined cloud.

    ``log_fn`` receives one dict per iteration with (iter, t, loss_z,
    loss_x). Gaussian count never changes; parameters are projected back to
    their valid ranges after each step.
    """
    config.validate()
    for p in prior.parameters():
        p.requires_grad_(False)
    params = cloud_to_params(cloud)
    opt = torch.optim.Adam(
        [
            {"params": [params["mu"]], "lr": config.lr_mu},
            {"params": [params["q"]], "lr": config.lr_q},
            {"params": [params["s"]], "lr": config.lr_s},
            {"params": [params["alpha"]], "lr": config.lr_alpha},
            {"params": [params["colors"]], "lr": config.lr_color},
        ],
        betas=(0.9, 0.95),
    )
    cond_seq = prior.embed([class_id]).detach()
    y_hat = cond_seq[0].clone().requires_grad_(True)  # warm start from prompt
    y_opt = Adam({"source_embedding": y_hat}, lr=config.lr_source)
    size = config.render_size or 2 * prior.image_size
    T = prior.schedule.T

    for it in range(config.iterations):
        s = float(torch.rand((), generator=generator))
        camera = interpolate_camera(trajectory, s)
        cam_cond = camera if use_camera_conditioning else None
        t = anneal_timestep(it, config.iterations, T, config.t_start_frac, config.t_end_frac)
        x, z = _render_latent(params, camera, prior, size)
        eps = torch.randn(z.shape, generator=generator)
        source_update(prior, add_noise(z.detach(), eps, t, prior.schedule), t, eps,
                      y_hat, y_opt, camera=cam_cond)
        loss, parts = _sds_terms(prior, x, z, t, eps, cond_seq, y_hat, config,
                                 camera=cam_cond)
        if not torch.isfinite(loss):
            if log_fn:
                log_fn({"iter": it, "t": t, "loss_z": float("nan"),
                        "loss_x": float("nan"), "skipped": True})
            continue
        if float(loss.detach()) < 1e-12:
            # numerically at the zero-loss fixed point (e.g. target and source
            # predictions agree); Adam would turn rounding noise into
            # lr-sized steps, so leave the cloud untouched
            if log_fn:
                log_fn({"iter": it, "t": t, **{k: parts[k] for k in ("loss_z", "loss_x")}})
            continue
        opt.zero_grad()
        loss.backward()
        assert y_hat.grad is None, "source embedding must not receive SDS gradients"
        opt.step()
        with torch.no_grad():  # project back to the valid parameter set
            params["q"] /= params["q"].norm(dim=-1, keepdim=True).clamp_min(1e-8)
            params["s"].clamp_(1e-4, 1.0)
            params["alpha"].clamp_(1e-4, 0.999)
            params["colors"].clamp_(0.0, 1.0)
        if log_fn:
            log_fn({"iter": it, "t": t, **{k: parts[k] for k in ("loss_z", "loss_x")}})
    return params_to_cloud(params)


# --------------------------------------------------------------------------
# toy 2D latent diffusion prior


@dataclass
class Ldm2DConfig:
    image_size: int = 32
    latent_size: int = 8
    latent_channels: int = 4
    autoencoder: str = "identity"
    base_channels: int = 64
    num_heads: int = 4
    cond_dim: int = 64
    cond_len: int = 4
    null_cond_prob: float = 0.1
    schedule_kind: str = "scaled_linear"
    timesteps: int = 1000
    lr: float = 3e-4


class Ldm2D(nn.Module):
    """Small single-view latent diffusion model (x0-prediction, no camera
    conditioning); stands in for the pretrained 2D prior during refinement.
    """

    def __init__(self, config: Ldm2DConfig, num_classes: int, class_names=None):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [
            f"class{i}" for i in range(1, num_classes + 1)
        ]
        self.autoencoder = make_autoencoder(
            config.autoencoder, config.image_size, config.latent_size, config.latent_channels
        )
        c_lat = self.autoencoder.latent_channels
        self.cond_table = ConditionTable(num_classes, config.cond_dim, config.cond_len)
        self.denoiser = MultiViewDenoiser(
            c_lat, c_lat, 8, config.base_channels, config.num_heads, config.cond_dim
        )
        mean, std = (0.5, 0.5) if config.autoencoder == "identity" else (0.0, 1.0)
        self.register_buffer("latent_mean", torch.full((c_lat,), float(mean)))
        self.register_buffer("latent_std", torch.full((c_lat,), float(std)))
        self.schedule = make_schedule(config.schedule_kind, config.timesteps)

    @property
    def image_size(self):
        return self.config.image_size

    def embed(self, class_ids):
        return self.cond_table(torch.as_tensor(class_ids, dtype=torch.long))

    def predict_x0(self, z_t, cond_seq, t, camera=None):
        rays = torch.zeros(z_t.shape[0], 1, 0, *z_t.shape[-2:], dtype=z_t.dtype)
        z_hat, _ = self.denoiser(z_t[:, None], rays, t, cond_seq)
        return z_hat[:, 0]

    def encode_image(self, x):
        z = self.autoencoder.encode(x)
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def decode_latent(self, z_std):
        z = z_std * self.latent_std[:, None, None] + self.latent_mean[:, None, None]
        return self.autoencoder.decode(z)

    def save(self, path):
        meta = {
            "model": "ldm2d",
            "config": dataclasses.asdict(self.config),
            "num_classes": self.num_classes,
            "class_names": self.class_names,
        }
        save_checkpoint(path, module_to_arrays(self), config=meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta is None or meta.get("model") != "ldm2d":
            raise ConfigError(f"{path} is not an ldm2d checkpoint")
        model = cls(Ldm2DConfig(**meta["config"]), meta["num_classes"], meta["class_names"])
        arrays_to_module(model, arrays)
        return model


def train_ldm2d(model: Ldm2D, images, class_ids, steps, *, batch_size=8,
                generator, opt=None, verbose=False):
    """x0-prediction training on an image stack (T, H, W, 3) in [0, 1]."""
    data = torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2)
    cids = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    with torch.no_grad():
        latents = model.encode_image(data)
    trainable = {
        n: p for n, p in model.named_parameters() if not n.startswith("autoencoder.")
    }
    opt = opt or Adam(trainable, lr=model.config.lr)
    cfg = model.config
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(latents), (min(batch_size, len(latents)),),
                            generator=generator)
        clean = latents[idx]
        ids = cids[idx].clone()
        drop = torch.rand(len(idx), generator=generator) < cfg.null_cond_prob
        ids[drop] = ConditionTable.NULL_CLASS
        t = torch.randint(1, cfg.timesteps + 1, (len(idx),), generator=generator)
        eps = torch.randn(clean.shape, generator=generator)
        noisy = add_noise(clean, eps, t.numpy(), model.schedule)
        pred = model.predict_x0(noisy, model.embed(ids), t)
        loss = F.mse_loss(pred, clean)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": opt.step_count, "loss": float(loss.detach())})
        if verbose and step % 200 == 0:
            print(f"ldm2d step {step} loss {float(loss.detach()):.5f}")
    return opt, history


class GMLDMPrior(nn.Module):
    """Adapter exposing a trained multi-view model as a single-view prior.

    The denoiser expects ray-map channels; when a camera is supplied its
    actual rays condition the prediction, otherwise the identity camera's.
    """

    def __init__(self, gmldm: GMLDM):
        super().__init__()
        self.gmldm = gmldm
        self.schedule = gmldm.schedule

    @property
    def image_size(self):
        return self.gmldm.config.image_size

    def embed(self, class_ids):
        return self.gmldm.embed_classes(class_ids)

    def predict_x0(self, z_t, cond_seq, t, camera=None):
        from .cameras import default_camera

        cam = camera if camera is not None else default_camera()
        res = z_t.shape[-1]
        rays = self.gmldm.ray_maps([cam], res, dtype=z_t.dtype)
        rays = rays[None].expand(z_t.shape[0], -1, -1, -1, -1)
        z_hat, _ = self.gmldm.denoiser(z_t[:, None], rays, t, cond_seq)
        return z_hat[:, 0]

    def encode_image(self, x):
        z = self.gmldm.autoencoder.encode(x)
        return self.gmldm.standardize(z)

    def decode_latent(self, z_std):
        return self.gmldm.autoencoder.decode(self.gmldm.destandardize(z_std))
