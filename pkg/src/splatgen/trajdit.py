"""Diffusion transformer over camera-trajectory tokens.

Tokens are the 13-d per-camera encodings from :mod:`splatgen.cameras`,
standardized per dimension with dataset statistics (the buffers travel with
the checkpoint). Blocks follow the adaLN-zero recipe: the timestep embedding
modulates pre-layer normalization and gates each residual branch, both
zero-initialized so every block starts as the exact identity; a
cross-attention layer (also zero-initialized output) reads the prompt-class
condition sequence. Training minimizes the x0-prediction objective; sampling
runs deterministic DDIM with classifier-free guidance on the x0 predictions,
decodes tokens through Gram-Schmidt and re-normalizes the result.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import Trajectory, decode_tokens, encode_tokens, normalize_trajectory
from .checkpoint import arrays_to_module, load_checkpoint, module_to_arrays, save_checkpoint
from .diffusion import add_noise, cfg_combine, ddim_step, inference_timesteps, make_schedule
from .errors import ConfigError
from .nncore import (
    Adam,
    Attention,
    ConditionTable,
    Mlp,
    TimestepEmbedder,
    init_zero,
    linear,
)


@dataclass
class TrajDiTConfig:
    num_blocks: int = 4        # paper-scale: 8
    hidden_size: int = 128     # paper-scale: 512
    num_heads: int = 4
    token_dim: int = 13
    max_frames: int = 12       # paper-scale M: 29
    cond_dim: int = 64
    cond_len: int = 4
    null_cond_prob: float = 0.1
    cfg_omega: float = 1.0
    schedule_kind: str = "scaled_linear"
    timesteps: int = 1000
    lr: float = 1e-4

    def validate(self):
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError("hidden size must be divisible by head count")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be >= 1")


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    def __init__(self, hidden, heads, cond_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = Attention(hidden, heads)
        self.norm_cross = nn.LayerNorm(hidden)
        self.cross = Attention(hidden, heads, context_dim=cond_dim, zero_out=True)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = Mlp(hidden)
        self.ada = init_zero(nn.Linear(hidden, 6 * hidden))

    def forward(self, x, cond, temb):
        mods = self.ada(F.silu(temb)).chunk(6, dim=-1)
        shift_sa, scale_sa, gate_sa, shift_mlp, scale_mlp, gate_mlp = mods
        x = x + gate_sa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_sa, scale_sa))
        x = x + self.cross(self.norm_cross(x), context=cond)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class TrajDiT(nn.Module):
    def __init__(self, config: TrajDiTConfig, num_classes: int, class_names=None):
        super().__init__()
        config.validate()
        self.config = config
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [
            f"class{i}" for i in range(1, num_classes + 1)
        ]
        h = config.hidden_size
        self.in_proj = linear(config.token_dim, h)
        self.temporal = nn.Parameter(torch.empty(config.max_frames, h))
        nn.init.trunc_normal_(self.temporal, std=0.02)
        self.t_embed = TimestepEmbedder(h)
        self.cond_table = ConditionTable(num_classes, config.cond_dim, config.cond_len)
        self.blocks = nn.ModuleList(
            [DiTBlock(h, config.num_heads, config.cond_dim) for _ in range(config.num_blocks)]
        )
        self.norm_final = nn.LayerNorm(h, elementwise_affine=False)
        self.ada_final = init_zero(nn.Linear(h, 2 * h))
        self.out_proj = linear(h, config.token_dim)
        self.register_buffer("token_mean", torch.zeros(config.token_dim))
        self.register_buffer("token_std", torch.ones(config.token_dim))
        self.schedule = make_schedule(config.schedule_kind, config.timesteps)

    def forward(self, tokens_t, class_ids, t):
        """Predict clean (standardized) tokens from noisy ones.

        tokens_t: (B, M, 13), class_ids: (B,) long, t: (B,) timesteps.
        """
        m = tokens_t.shape[1]
        if m > self.config.max_frames:
            raise ConfigError(
                f"{m} frames exceeds configured maximum {self.config.max_frames}"
            )
        x = self.in_proj(tokens_t) + self.temporal[:m]
        temb = self.t_embed(t)
        cond = self.cond_table(class_ids)
        for block in self.blocks:
            x = block(x, cond, temb)
        shift, scale = self.ada_final(F.silu(temb)).chunk(2, dim=-1)
        return self.out_proj(modulate(self.norm_final(x), shift, scale))

    def projection_only(self, tokens_t):
        """The non-block path (used to verify blocks start as identities)."""
        x = self.in_proj(tokens_t) + self.temporal[: tokens_t.shape[1]]
        return self.out_proj(self.norm_final(x))

    # token standardization ----------------------------------------------
    def set_token_statistics(self, tokens):
        flat = np.asarray(tokens, dtype=np.float64).reshape(-1, self.config.token_dim)
        self.token_mean.copy_(torch.as_tensor(flat.mean(axis=0), dtype=torch.float32))
        std = np.maximum(flat.std(axis=0), 1e-3)
        self.token_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    def standardize(self, tokens):
        return (tokens - self.token_mean) / self.token_std

    def destandardize(self, tokens_std):
        return tokens_std * self.token_std + self.token_mean

    # persistence ----------------------------------------------------------
    def save(self, path, extra_arrays=None):
        arrays = module_to_arrays(self)
        if extra_arrays:
            arrays.update(extra_arrays)
        meta = {
            "model": "trajdit",
            "config": dataclasses.asdict(self.config),
            "num_classes": self.num_classes,
            "class_names": self.class_names,
        }
        save_checkpoint(path, arrays, config=meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta is None or meta.get("model") != "trajdit":
            raise ConfigError(f"{path} is not a trajdit checkpoint")
        model = cls(TrajDiTConfig(**meta["config"]), meta["num_classes"], meta["class_names"])
        own = set(module_to_arrays(model))
        arrays_to_module(model, {k: v for k, v in arrays.items() if k in own})
        extras = {k: v for k, v in arrays.items() if k not in own}
        return model, extras


def denoise_trajectory(model: TrajDiT, tokens_t_std, class_id: int, t: int):
    """Single-trajectory x0 prediction in standardized token space."""
    out = model(
        torch.as_tensor(tokens_t_std, dtype=torch.float32)[None],
        torch.tensor([class_id]), torch.tensor([t]),
    )
    return out[0]


def dataset_tokens(dataset):
    """(Trajectory, class_id) pairs -> stacked tokens plus class array.

    Every trajectory must already be normalized; anything else is rejected.
    """
    if not dataset:
        raise ConfigError("empty trajectory dataset")
    toks, cids = [], []
    m = len(dataset[0][0])
    for traj, cid in dataset:
        if len(traj) != m:
            raise ConfigError("all trajectories in a dataset must share M")
        if not traj.is_normalized():
            raise ConfigError("dataset contains a non-normalized trajectory")
        toks.append(encode_tokens(traj))
        cids.append(cid)
    return np.stack(toks), np.asarray(cids, dtype=np.int64)


def train_traj_dit(model: TrajDiT, dataset, steps, *, batch_size=32, generator,
                   opt=None, set_statistics=True, verbose=False, log_every=200):
    """Minimize the x0-prediction MSE over random (t, noise) draws.

    With probability ``null_cond_prob`` a sample's condition is replaced by
    the null class so classifier-free guidance is possible at sampling time.
    Returns (opt, history rows).
    """
    tokens, class_ids = dataset_tokens(dataset)
    if set_statistics:
        model.set_token_statistics(tokens)
    data = model.standardize(torch.as_tensor(tokens, dtype=torch.float32))
    cids = torch.as_tensor(class_ids)
    opt = opt or Adam(model, lr=model.config.lr)
    cfg = model.config
    history = []
    n = len(data)
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        clean = data[idx]
        ids = cids[idx].clone()
        drop = torch.rand(len(idx), generator=generator) < cfg.null_cond_prob
        ids[drop] = ConditionTable.NULL_CLASS
        t = torch.randint(1, cfg.timesteps + 1, (len(idx),), generator=generator)
        eps = torch.randn(clean.shape, generator=generator)
        noisy = add_noise(clean, eps, t.numpy(), model.schedule)
        pred = model(noisy, ids, t)
        loss = F.mse_loss(pred, clean)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": opt.step_count, "loss": float(loss.detach())})
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"step {opt.step_count} loss {float(loss.detach()):.6f}")
    return opt, history


def sample_trajectory(model: TrajDiT, class_id: int, num_steps=100, omega=None,
                      generator=None, num_frames=None, trace=None) -> Trajectory:
    """DDIM sampling of a trajectory for a prompt class.

    Guidance is applied to the x0 predictions. The decoded trajectory is
    re-normalized (Gram-Schmidt decoding does not exactly preserve the
    identity-first/unit-scale constraints).
    """
    cfg = model.config
    omega = cfg.cfg_omega if omega is None else omega
    m = num_frames or cfg.max_frames
    ts = inference_timesteps(model.schedule.T, num_steps)
    with torch.no_grad():
        z = torch.randn(1, m, cfg.token_dim, generator=generator)
        for t, t_prev in zip(ts[:-1], ts[1:]):
            tt = torch.tensor([t])
            x0 = model(z, torch.tensor([class_id]), tt)
            if omega != 1.0:
                x0_u = model(z, torch.tensor([ConditionTable.NULL_CLASS]), tt)
                x0 = cfg_combine(x0, x0_u, omega)
            if trace is not None:
                trace.append({"t": t, "x0_std": x0[0].clone(), "state_std": z[0].clone()})
            z = ddim_step(z, x0, t, t_prev, model.schedule)
        tokens = model.destandardize(z[0]).numpy()
    return normalize_trajectory(decode_tokens(tokens))
