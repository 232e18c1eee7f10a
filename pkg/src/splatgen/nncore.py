"""Neural-network substrate used by every trained model in the pipeline.

Tensors, autograd and the Adam update are provided by torch (CPU only);
this module pins down the pieces the rest of the package relies on:

* layer constructors with controlled initialization (truncated normal
  std 0.02 for projections, zeros where a residual branch must start as
  the identity),
* a precision toggle (float32 for training, float64 for gradient checks),
* an Adam wrapper with the (0.9, 0.95) betas used throughout, a NaN-gradient
  guard and name-keyed state export for checkpointing,
* a central finite-difference gradient checker.
"""

from contextlib import contextmanager

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError

Tensor = torch.Tensor

DEFAULT_BETAS = (0.9, 0.95)


@contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype: "float32" or "float64".

    Finite-difference tolerances are meaningless at 32-bit, so the gradient
    check suites build their models under ``precision("float64")``.
    """
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode: {mode}")
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64 if mode == "float64" else torch.float32)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def init_projection(layer: nn.Linear, std: float = 0.02) -> nn.Linear:
    nn.init.trunc_normal_(layer.weight, std=std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def init_zero(layer) -> nn.Module:
    """Zero a layer's weights so its output (and residual branch) starts at 0."""
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def linear(in_features: int, out_features: int, bias: bool = True) -> nn.Linear:
    return init_projection(nn.Linear(in_features, out_features, bias=bias))


class Attention(nn.Module):
    """Multi-head attention; self-attention when no context is given.

    Queries come from ``x``; keys/values from ``context`` (cross-attention)
    or from ``x`` itself. ``zero_out`` zero-initializes the output projection
    so the residual contribution starts at exactly zero.
    """

    def __init__(self, dim, num_heads, context_dim=None, zero_out=False):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        ctx = context_dim if context_dim is not None else dim
        self.to_q = linear(dim, dim)
        self.to_k = linear(ctx, dim)
        self.to_v = linear(ctx, dim)
        self.to_out = linear(dim, dim)
        if zero_out:
            init_zero(self.to_out)

    def forward(self, x, context=None):
        # x: (B, T, D), context: (B, S, Dc)
        ctx = x if context is None else context
        b, t, _ = x.shape
        s = ctx.shape[1]
        q = self.to_q(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.to_k(ctx).view(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.to_v(ctx).view(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.to_out(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden_mult=4, out_dim=None):
        super().__init__()
        out_dim = out_dim if out_dim is not None else dim
        self.fc1 = linear(dim, dim * hidden_mult)
        self.fc2 = linear(dim * hidden_mult, out_dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a 2-layer MLP."""

    def __init__(self, hidden_size, freq_dim=128):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = linear(freq_dim, hidden_size)
        self.fc2 = linear(hidden_size, hidden_size)

    def sinusoidal(self, t):
        # t: (B,) float or int timesteps
        half = self.freq_dim // 2
        dtype = self.fc1.weight.dtype
        freqs = torch.exp(-np.log(10000.0) * torch.arange(half, dtype=dtype) / half)
        args = t.to(dtype)[:, None] * freqs[None, :]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t):
        return self.fc2(F.silu(self.fc1(self.sinusoidal(t))))


class ConditionTable(nn.Module):
    """Learned class-conditioning table standing in for encoded text.

    Each prompt class maps to a short sequence of ``seq_len`` vectors.
    Index 0 is reserved for the null (unconditional) class and is never a
    real prompt class.
    """

    NULL_CLASS = 0

    def __init__(self, num_classes, dim, seq_len=4):
        super().__init__()
        self.num_classes = num_classes
        self.seq_len = seq_len
        self.dim = dim
        self.table = nn.Embedding(num_classes + 1, seq_len * dim)
        nn.init.trunc_normal_(self.table.weight, std=0.02)

    def forward(self, class_ids):
        # class_ids: (B,) long in [0, num_classes]; 0 is the null class
        if torch.any(class_ids < 0) or torch.any(class_ids > self.num_classes):
            raise ValueError("class id out of range")
        emb = self.table(class_ids)
        return emb.view(-1, self.seq_len, self.dim)

    def null_ids(self, batch: int) -> Tensor:
        return torch.full((batch,), self.NULL_CLASS, dtype=torch.long)


class Adam:
    """Adam over a module's named parameters with name-keyed state export.

    Thin wrapper around ``torch.optim.Adam`` that (a) defaults to the
    (0.9, 0.95) betas used by every training run here, (b) refuses to step
    on non-finite gradients, and (c) serializes its state as named arrays so
    checkpoints are deterministic and resumable.
    """

    def __init__(self, named_params, lr=1e-4, betas=DEFAULT_BETAS, eps=1e-8):
        if isinstance(named_params, nn.Module):
            named_params = dict(named_params.named_parameters())
        self.names = sorted(named_params)
        self.params = [named_params[n] for n in self.names]
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @property
    def lr(self):
        return self.opt.param_groups[0]["lr"]

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self):
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
        self.opt.step()
        self.step_count += 1

    def state_arrays(self):
        """Optimizer state as {name: np.ndarray}, suitable for checkpointing."""
        out = {"adam/step": np.array([self.step_count], dtype=np.int64)}
        for name, p in zip(self.names, self.params):
            state = self.opt.state.get(p)
            if not state:
                continue
            out[f"adam/{name}/m"] = state["exp_avg"].detach().numpy().copy()
            out[f"adam/{name}/v"] = state["exp_avg_sq"].detach().numpy().copy()
            out[f"adam/{name}/t"] = np.array([int(state["step"])], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["adam/step"][0])
        for name, p in zip(self.names, self.params):
            key = f"adam/{name}/m"
            if key not in arrays:
                continue
            state = self.opt.state.setdefault(p, {})
            state["exp_avg"] = torch.as_tensor(arrays[key]).to(p.dtype)
            state["exp_avg_sq"] = torch.as_tensor(arrays[f"adam/{name}/v"]).to(p.dtype)
            state["step"] = torch.tensor(float(arrays[f"adam/{name}/t"][0]))


def finite_difference_gradients(fn, tensors, eps=1e-5):
    """Central finite-difference gradients of scalar ``fn`` w.r.t. ``tensors``.

    ``fn`` is called with no arguments and must read the (float64) tensors in
    the list; returns one gradient array per tensor.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2 * eps)
            grads.append(g.view_as(t).clone())
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Max elementwise relative error between gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck_module(module, make_inputs, loss_fn, eps=1e-5, tol=1e-4):
    """Check a module's parameter gradients against finite differences.

    ``make_inputs()`` returns the forward inputs; ``loss_fn(module, *inputs)``
    returns a scalar. The module must be built in float64. Returns the max
    relative error across all parameters.
    """
    inputs = make_inputs()
    loss = loss_fn(module, *inputs)
    loss.backward()
    params = [p for p in module.parameters() if p.requires_grad]
    analytic = [
        (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for p in params
    ]

    def eval_loss():
        with torch.enable_grad():
            return loss_fn(module, *inputs).detach()

    numeric = finite_difference_gradients(eval_loss, [p.data for p in params], eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, relative_error(a.numpy(), n.numpy()))
    module.zero_grad(set_to_none=True)
    return worst
