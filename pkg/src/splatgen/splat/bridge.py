"""Torch autograd bridge for the rasterizer.

Wraps the numpy/Cython renderer in an ``autograd.Function`` so training
loops can backpropagate image losses into Gaussian parameters (and from
there into the networks that produced them). The kernel computes in
float64 internally; inputs and gradients keep the caller's dtype.
"""

import numpy as np
import torch

from .render import render_arrays, render_backward


class _RenderFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, q, s, alpha, colors, camera, resolution, bg, near):
        out, rctx = render_arrays(
            mu.detach().numpy(), q.detach().numpy(), s.detach().numpy(),
            alpha.detach().numpy(), colors.detach().numpy(),
            camera, resolution, bg=bg, near=near, want_ctx=True,
        )
        ctx.rctx = rctx
        ctx.in_dtype = mu.dtype
        rgb = torch.from_numpy(out.rgb).to(mu.dtype)
        alpha_map = torch.from_numpy(out.alpha).to(mu.dtype)
        depth_map = torch.from_numpy(out.depth).to(mu.dtype)
        ctx.mark_non_differentiable(alpha_map, depth_map)
        return rgb, alpha_map, depth_map

    @staticmethod
    def backward(ctx, grad_rgb, _grad_alpha, _grad_depth):
        grads = render_backward(ctx.rctx, grad_rgb.detach().numpy().astype(np.float64))
        to = lambda a: torch.from_numpy(a).to(ctx.in_dtype)
        return (
            to(grads["mu"]), to(grads["q"]), to(grads["s"]), to(grads["alpha"]),
            to(grads["sh"][:, 0, :]), None, None, None, None,
        )


def render_torch(mu, q, s, alpha, colors, camera, resolution, bg=None, near=0.01):
    """Differentiable render; returns (rgb (H,W,3), alpha (H,W), depth (H,W)).

    Only the rgb output carries gradients (to mu, q, s, alpha, colors).
    """
    return _RenderFunction.apply(mu, q, s, alpha, colors, camera, resolution, bg, near)
