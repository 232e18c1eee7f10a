"""Latent autoencoders for the multi-view diffusion model.

Two flavors behind one interface:

* ``IdentityAutoencoder`` — pixel (un)shuffle only, so decode(encode(x))
  is bit-exact. Used by tests and the default toy configuration.
* ``ConvAutoencoder`` — a small learned conv stack, trained with MSE.

Images are (B, 3, H, W) in [0, 1]; latents are (B, c, h, w).
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError
from ..nncore import Adam


class IdentityAutoencoder(nn.Module):
    def __init__(self, image_size: int, latent_size: int):
        super().__init__()
        if image_size % latent_size != 0:
            raise ConfigError("latent resolution must divide image resolution")
        self.factor = image_size // latent_size
        self.latent_channels = 3 * self.factor**2
        self.image_size = image_size
        self.latent_size = latent_size

    def encode(self, x):
        # any resolution divisible by the shuffle factor works (refinement
        # renders at a multiple of the native size)
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ConfigError(
                f"image size {tuple(x.shape[-2:])} not divisible by {self.factor}"
            )
        return F.pixel_unshuffle(x, self.factor)

    def decode(self, z):
        return F.pixel_shuffle(z, self.factor)


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class ConvAutoencoder(nn.Module):
    def __init__(self, image_size: int, latent_size: int, latent_channels: int = 4,
                 base: int = 32):
        super().__init__()
        if image_size % latent_size != 0:
            raise ConfigError("latent resolution must divide image resolution")
        steps = int(np.log2(image_size // latent_size))
        if 2**steps * latent_size != image_size:
            raise ConfigError("image/latent ratio must be a power of two")
        self.image_size = image_size
        self.latent_size = latent_size
        self.latent_channels = latent_channels

        self.down_factor = 2**steps
        enc = [nn.Conv2d(3, base, 3, padding=1)]
        ch = base
        for _ in range(steps):
            enc += [_ConvBlock(ch, ch * 2), nn.Conv2d(ch * 2, ch * 2, 3, stride=2, padding=1)]
            ch *= 2
        enc += [_ConvBlock(ch, ch), nn.Conv2d(ch, latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, ch, 3, padding=1), _ConvBlock(ch, ch)]
        for _ in range(steps):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), _ConvBlock(ch, ch // 2)]
            ch //= 2
        dec += [nn.Conv2d(ch, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x):
        if x.shape[-1] % self.down_factor or x.shape[-2] % self.down_factor:
            raise ConfigError(
                f"image size {tuple(x.shape[-2:])} not divisible by {self.down_factor}"
            )
        return self.encoder(x)

    def decode(self, z):
        return torch.sigmoid(self.decoder(z))


def make_autoencoder(kind: str, image_size: int, latent_size: int, latent_channels: int = 4):
    if kind == "identity":
        return IdentityAutoencoder(image_size, latent_size)
    if kind == "conv":
        return ConvAutoencoder(image_size, latent_size, latent_channels)
    raise ConfigError(f"unknown autoencoder kind {kind!r}")


def psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def train_autoencoder(ae, images, steps, lr=2e-3, batch_size=16, generator=None):
    """MSE training on a stack of images (T, 3, H, W); returns loss history."""
    opt = Adam(ae, lr=lr)
    history = []
    n = len(images)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        batch = images[idx]
        recon = ae.decode(ae.encode(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def latent_statistics(ae, images):
    """Per-channel latent mean/std over an image stack, for standardization."""
    with torch.no_grad():
        z = ae.encode(images)
    mean = z.mean(dim=(0, 2, 3))
    std = z.std(dim=(0, 2, 3)).clamp_min(1e-3)
    return mean, std
