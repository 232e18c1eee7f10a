"""Finite-difference verification suites, runnable from the CLI.

Every differentiable building block is checked against central finite
differences in float64: each layer type, the rasterizer's five parameter
groups, and the refiner's source-embedding objective.
"""

import numpy as np
import torch

from .cameras import default_camera
from .nncore import (
    Attention,
    Mlp,
    gradcheck_module,
    finite_difference_gradients,
    linear,
    precision,
    relative_error,
)
from .splat import GaussianCloud, render, render_backward


def check_layers(tol=1e-4):
    """FD-check every layer type; yields (name, max rel error, tol, ok)."""
    results = []
    with precision("float64"):
        torch.manual_seed(0)
        cases = {
            "linear": (linear(5, 4), lambda: (torch.randn(3, 5),)),
            "layer_norm": (torch.nn.LayerNorm(6), lambda: (torch.randn(4, 6),)),
            "attention_self": (Attention(8, 2), lambda: (torch.randn(2, 3, 8),)),
            "mlp": (Mlp(6), lambda: (torch.randn(2, 6),)),
        }
        for name, (module, make_inputs) in cases.items():
            err = gradcheck_module(
                module, make_inputs, lambda m, x: (m(x) ** 2).sum()
            )
            results.append((f"layer/{name}", err, tol, err < tol))
        cross = Attention(8, 2, context_dim=6)
        err = gradcheck_module(
            cross,
            lambda: (torch.randn(2, 3, 8), torch.randn(2, 4, 6)),
            lambda m, x, c: (m(x, context=c) ** 2).sum(),
        )
        results.append(("layer/attention_cross", err, tol, err < tol))
    return results


def _random_cloud(rng, k):
    q = rng.normal(size=(k, 4))
    return {
        "mu": np.column_stack(
            [rng.uniform(-0.4, 0.4, k), rng.uniform(-0.4, 0.4, k), rng.uniform(1.0, 2.5, k)]
        ),
        "q": q / np.linalg.norm(q, axis=1, keepdims=True),
        "s": rng.uniform(0.05, 0.3, (k, 3)),
        "alpha": rng.uniform(0.2, 0.9, k),
        "sh": rng.uniform(0.1, 0.9, (k, 1, 3)),
    }


def check_rasterizer(k=8, size=12, tol=1e-3, eps=1e-6, seed=0):
    """FD-check rasterizer gradients for all five parameter groups."""
    rng = np.random.default_rng(seed)
    params = _random_cloud(rng, k)
    camera = default_camera()
    weights = rng.normal(size=(size, size, 3))

    def loss_of():
        out = render(GaussianCloud(**params), camera, (size, size))
        return np.sum(out.rgb * weights)

    _, ctx = render(GaussianCloud(**params), camera, (size, size), want_ctx=True)
    analytic = render_backward(ctx, weights)
    results = []
    for name in ("mu", "q", "s", "alpha", "sh"):
        flat = params[name].reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_of()
            flat[i] = orig - eps
            lm = loss_of()
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * eps)
        err = relative_error(analytic[name].reshape(-1), fd, floor=1e-6)
        results.append((f"rasterizer/{name}", err, tol, err < tol))
    return results


def check_source_objective(tol=1e-3):
    """FD-check the gradient of the source-embedding objective."""
    from .diffusion import eps_from_x0
    from .refiner import Ldm2D, Ldm2DConfig

    with precision("float64"):
        torch.manual_seed(1)
        model = Ldm2D(
            Ldm2DConfig(image_size=8, latent_size=4, base_channels=16, cond_dim=16,
                        cond_len=2),
            num_classes=1,
        )
        # the condition path is zero-initialized; give it weight so the
        # embedding actually influences the prediction
        for p in model.denoiser.cond_attn.attn.to_out.parameters():
            torch.nn.init.normal_(p, std=0.05)
        z_t = torch.randn(1, model.autoencoder.latent_channels, 4, 4)
        eps = torch.randn_like(z_t)
        t = 400
        y_hat = model.embed([1])[0].detach().clone().requires_grad_(True)

        def objective():
            pred = model.predict_x0(z_t, y_hat[None], torch.tensor([t]))
            eps_pred = eps_from_x0(z_t, pred, t, model.schedule)
            return ((eps_pred - eps) ** 2).mean()

        loss = objective()
        loss.backward()
        analytic = y_hat.grad.clone()
        numeric = finite_difference_gradients(lambda: objective().detach(), [y_hat.data])[0]
        err = relative_error(analytic.numpy(), numeric.numpy(), floor=1e-6)
    return [("refiner/source_embedding", err, tol, err < tol)]


def run_all(quick=False):
    results = []
    results += check_layers()
    results += check_rasterizer(k=4 if quick else 8, size=8 if quick else 12)
    results += check_source_objective()
    return results
