"""Multi-view latent diffusion model with a pixel-aligned Gaussian decoder.

The denoiser is a small U-net over per-view latents (ray maps concatenated
channelwise), with cross-view self-attention and condition cross-attention
at the interior resolution and two output heads: denoised latents and
auxiliary features. The Gaussian decoder upsamples (latents, features) to
image resolution and emits per-pixel Gaussian parameters; positions are
pinned to the pixel rays, mu = o + tau * d.

There are no per-view embeddings anywhere, so the denoiser is exactly
equivariant under permutations of the views (with their ray maps).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..cameras import compute_ray_map, pixel_rays
from ..checkpoint import arrays_to_module, load_checkpoint, module_to_arrays, save_checkpoint
from ..diffusion import make_schedule
from ..errors import ConfigError
from ..nncore import Attention, ConditionTable, TimestepEmbedder
from .autoencoder import make_autoencoder


@dataclass
class GMLDMConfig:
    dense_views: int = 12          # M
    sparse_views: int = 4          # N
    image_size: int = 32
    latent_size: int = 8
    latent_channels: int = 4       # learned-autoencoder mode only
    autoencoder: str = "identity"
    cfg_2d: float = 7.5
    cfg_render: float = 1.0
    render_interval: int = 10      # 1 rendering-based step per this many
    base_channels: int = 64
    feat_channels: int = 16
    cond_dim: int = 64
    cond_len: int = 4
    num_heads: int = 4
    depth_near: float = 0.1
    depth_far: float = 10.0
    supervision_views: int = 2
    single_view_prob: float = 0.0
    null_cond_prob: float = 0.1
    schedule_kind: str = "scaled_linear"
    timesteps: int = 1000
    lr: float = 3e-4

    def validate(self):
        if self.sparse_views > self.dense_views:
            raise ConfigError("sparse view count exceeds dense view count")
        if self.image_size % self.latent_size != 0:
            raise ConfigError("latent resolution must divide image resolution")
        if self.render_interval < 1:
            raise ConfigError("render interval must be >= 1")


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, temb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out) if temb_dim else None
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ViewTokenAttention(nn.Module):
    """Self-attention over the joint token set of all views of a scene."""

    def __init__(self, channels, heads):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = Attention(channels, heads, zero_out=True)

    def forward(self, x, num_views):
        bn, c, h, w = x.shape
        b = bn // num_views
        tokens = self.norm(x).reshape(b, num_views, c, h * w)
        tokens = tokens.permute(0, 1, 3, 2).reshape(b, num_views * h * w, c)
        out = self.attn(tokens)
        out = out.reshape(b, num_views, h * w, c).permute(0, 1, 3, 2)
        return x + out.reshape(bn, c, h, w)


class CondAttention(nn.Module):
    """Cross-attention from view-pixel tokens to the condition sequence."""

    def __init__(self, channels, heads, cond_dim):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = Attention(channels, heads, context_dim=cond_dim, zero_out=True)

    def forward(self, x, cond, num_views):
        bn, c, h, w = x.shape
        b = bn // num_views
        tokens = self.norm(x).reshape(b, num_views, c, h * w)
        tokens = tokens.permute(0, 1, 3, 2).reshape(b, num_views * h * w, c)
        out = self.attn(tokens, context=cond)
        out = out.reshape(b, num_views, h * w, c).permute(0, 1, 3, 2)
        return x + out.reshape(bn, c, h, w)


class MultiViewDenoiser(nn.Module):
    def __init__(self, in_channels, latent_channels, feat_channels, base, heads, cond_dim):
        super().__init__()
        temb_dim = base * 4
        self.t_embed = TimestepEmbedder(temb_dim)
        self.conv_in = nn.Conv2d(in_channels, base, 3, padding=1)
        self.res_down = ResBlock(base, base, temb_dim)
        self.down = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.res_mid1 = ResBlock(base * 2, base * 2, temb_dim)
        self.view_attn = ViewTokenAttention(base * 2, heads)
        self.cond_attn = CondAttention(base * 2, heads, cond_dim)
        self.res_mid2 = ResBlock(base * 2, base * 2, temb_dim)
        self.up = nn.Conv2d(base * 2, base, 3, padding=1)
        self.res_up = ResBlock(base * 2, base, temb_dim)
        self.norm_out = nn.GroupNorm(8, base)
        self.head_z = nn.Conv2d(base, latent_channels, 3, padding=1)
        self.head_f = nn.Conv2d(base, feat_channels, 3, padding=1)

    def forward(self, z_t, rays, t, cond):
        # z_t: (B, N, c, h, w), rays: (B, N, 6, h, w), t: (B,), cond: (B, L, D)
        b, n = z_t.shape[:2]
        x = torch.cat([z_t, rays], dim=2).reshape(b * n, -1, *z_t.shape[-2:])
        temb = self.t_embed(t).repeat_interleave(n, dim=0)
        x = self.conv_in(x)
        skip = self.res_down(x, temb)
        x = self.down(skip)
        x = self.res_mid1(x, temb)
        x = self.view_attn(x, n)
        x = self.cond_attn(x, cond, n)
        x = self.res_mid2(x, temb)
        x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.res_up(torch.cat([x, skip], dim=1), temb)
        x = F.silu(self.norm_out(x))
        z_hat = self.head_z(x).reshape(b, n, -1, *z_t.shape[-2:])
        feats = self.head_f(x).reshape(b, n, -1, *z_t.shape[-2:])
        return z_hat, feats


# decoder output channel layout
_TAU, _Q, _S, _ALPHA, _RGB = 0, slice(1, 5), slice(5, 8), 8, slice(9, 12)


class GaussianDecoder(nn.Module):
    """(latents, features) at latent resolution -> 12 raw Gaussian channels
    per pixel at image resolution: depth, quaternion, scale, opacity, color.
    """

    def __init__(self, in_channels, base, up_steps):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, base, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(base, base) for _ in range(up_steps + 1)])
        self.norm_out = nn.GroupNorm(8, base)
        self.head = nn.Conv2d(base, 12, 3, padding=1)
        with torch.no_grad():  # start near the normalized-scene working range
            self.head.bias.zero_()
            self.head.bias[_TAU] = -2.9
            self.head.bias[_S] = -3.2

    def forward(self, x):
        x = self.conv_in(x)
        x = self.blocks[0](x)
        for block in self.blocks[1:]:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x)
        return self.head(F.silu(self.norm_out(x)))


def _bounded_sigmoid(x, lo, hi, margin=1e-4):
    # strictly inside (lo, hi) even where float32 sigmoid saturates to 0/1
    unit = margin + (1.0 - 2.0 * margin) * torch.sigmoid(x)
    return lo + (hi - lo) * unit


def gaussian_features(raw, near, far):
    """Raw decoder channels -> activated per-pixel Gaussian parameters.

    raw: (..., 12, H, W). Depth lands strictly inside (near, far), scales in
    [1e-4, 1], opacity strictly inside (0, 1) so compositing weights never
    saturate, colors in [0, 1].
    """
    tau = _bounded_sigmoid(raw[..., _TAU, :, :], near, far)
    q = raw[..., _Q, :, :].movedim(-3, -1)
    q = q + torch.tensor([1.0, 0, 0, 0], dtype=raw.dtype)
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    s = torch.clamp(torch.exp(raw[..., _S, :, :].clamp(max=6.0)), 1e-4, 1.0)
    alpha = _bounded_sigmoid(raw[..., _ALPHA, :, :], 0.0, 0.999)
    rgb = torch.sigmoid(raw[..., _RGB, :, :])
    return {"tau": tau, "q": q, "s": s.movedim(-3, -1), "alpha": alpha,
            "rgb": rgb.movedim(-3, -1)}


def gaussians_from_features(features, cams, image_size, dtype=torch.float32):
    """Per-view activated features -> flat torch Gaussian tensors.

    features: dict with tau (N, H, W), q (N, H, W, 4), s (N, H, W, 3),
    alpha (N, H, W), rgb (N, H, W, 3). Positions follow mu = o + tau * d
    along each pixel's ray.
    """
    mus = []
    for i, cam in enumerate(cams):
        origin, dirs = pixel_rays(cam, (image_size, image_size))
        o = torch.as_tensor(origin, dtype=dtype)
        d = torch.as_tensor(dirs, dtype=dtype)
        mus.append(o + features["tau"][i][..., None] * d)
    mu = torch.stack(mus).reshape(-1, 3)
    return {
        "mu": mu,
        "q": features["q"].reshape(-1, 4),
        "s": features["s"].reshape(-1, 3),
        "alpha": features["alpha"].reshape(-1),
        "colors": features["rgb"].reshape(-1, 3),
    }


class GMLDM(nn.Module):
    """Full model: frozen autoencoder, conditional denoiser, Gaussian decoder.

    Latents are standardized (per-channel affine) before diffusion so the
    unit-variance noise assumption holds; encode/decode of the autoencoder
    itself stays untouched (bit-exact in identity mode).
    """

    def __init__(self, config: GMLDMConfig, num_classes: int, class_names=None):
        super().__init__()
        config.validate()
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
            c_lat + 6, c_lat, config.feat_channels, config.base_channels,
            config.num_heads, config.cond_dim,
        )
        up_steps = int(np.log2(config.image_size // config.latent_size))
        self.decoder = GaussianDecoder(
            c_lat + config.feat_channels, config.base_channels, up_steps
        )
        if config.autoencoder == "identity":
            mean, std = 0.5, 0.5  # images in [0, 1] -> latents in [-1, 1]
        else:
            mean, std = 0.0, 1.0  # refreshed from data after AE training
        self.register_buffer("latent_mean", torch.full((c_lat,), float(mean)))
        self.register_buffer("latent_std", torch.full((c_lat,), float(std)))
        self.schedule = make_schedule(config.schedule_kind, config.timesteps)

    # latent standardization -------------------------------------------------
    def standardize(self, z_raw):
        return (z_raw - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def destandardize(self, z_std):
        return z_std * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    def set_latent_statistics(self, mean, std):
        self.latent_mean.copy_(mean)
        self.latent_std.copy_(std)

    # geometry ---------------------------------------------------------------
    def ray_maps(self, cams, resolution, dtype=torch.float32):
        maps = [compute_ray_map(cam, (resolution, resolution)) for cam in cams]
        return torch.as_tensor(np.stack(maps), dtype=dtype)

    def embed_classes(self, class_ids):
        return self.cond_table(torch.as_tensor(class_ids, dtype=torch.long))

    def decode_raw_gaussians(self, z_hat_std, feats):
        """Denoised (standardized) latents + features -> raw decoder channels."""
        b, n = z_hat_std.shape[:2]
        x = torch.cat([z_hat_std, feats], dim=2).reshape(b * n, -1, *z_hat_std.shape[-2:])
        raw = self.decoder(x)
        return raw.reshape(b, n, 12, self.config.image_size, self.config.image_size)

    # persistence ------------------------------------------------------------
    def save(self, path, extra_arrays=None):
        arrays = module_to_arrays(self)
        if extra_arrays:
            arrays.update(extra_arrays)
        meta = {
            "model": "gmldm",
            "config": dataclasses.asdict(self.config),
            "num_classes": self.num_classes,
            "class_names": self.class_names,
        }
        save_checkpoint(path, arrays, config=meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta is None or meta.get("model") != "gmldm":
            raise ConfigError(f"{path} is not a gmldm checkpoint")
        model = cls(GMLDMConfig(**meta["config"]), meta["num_classes"], meta["class_names"])
        own = set(module_to_arrays(model))
        arrays_to_module(model, {k: v for k, v in arrays.items() if k in own})
        extras = {k: v for k, v in arrays.items() if k not in own}
        return model, extras
