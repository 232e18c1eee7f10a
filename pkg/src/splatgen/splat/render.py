"""Differentiable rendering of Gaussian clouds.

``render`` projects, depth-sorts and composites front-to-back;
``render_backward`` returns analytic gradients for every Gaussian parameter
group. Gaussians behind the near plane are culled and receive exactly zero
gradients. All heavy per-pixel work happens in the selected kernel backend;
everything here is O(K).
"""

from dataclasses import dataclass

import numpy as np

from ..cameras import Camera
from ..errors import NumericError
from . import backend
from .cloud import GaussianCloud
from ._kernels_np import G_MIN
from .project import (
    BLUR_FLOOR,
    DEFAULT_NEAR,
    invert_cov2d,
    jacobians,
    max_eigval_2d,
    pixel_focal,
    project_backward,
    quat_rotmats,
)

# radius (in sigma units) beyond which a contribution is provably < G_MIN
_CUTOFF = float(np.sqrt(2.0 * np.log(1.0 / G_MIN)))


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) accumulated opacity
    depth: np.ndarray  # (H, W) opacity-weighted expected depth


def _bboxes(mean2d, cov2d, h, w):
    radius = _CUTOFF * np.sqrt(max_eigval_2d(cov2d))
    x0 = np.clip(np.floor(mean2d[:, 0] - radius) - 1, 0, w).astype(np.int64)
    x1 = np.clip(np.ceil(mean2d[:, 0] + radius) + 2, 0, w).astype(np.int64)
    y0 = np.clip(np.floor(mean2d[:, 1] - radius) - 1, 0, h).astype(np.int64)
    y1 = np.clip(np.ceil(mean2d[:, 1] + radius) + 2, 0, h).astype(np.int64)
    return np.stack([x0, x1, y0, y1], axis=1)


def render_arrays(mu, q, s, alpha, colors, camera: Camera, resolution,
                  bg=None, near=DEFAULT_NEAR, want_ctx=False, kernels=None):
    """Render raw parameter arrays; quaternions are normalized internally.

    Returns a RenderOutput (float64), plus a context dict for
    ``render_backward`` when ``want_ctx`` is set.
    """
    h, w = int(resolution[0]), int(resolution[1])
    bg = np.zeros(3) if bg is None else np.asarray(bg, dtype=np.float64).reshape(3)
    kernels = kernels or backend.get_kernels()
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    K = len(mu)
    for name, arr in (("mu", mu), ("q", q), ("s", s), ("alpha", alpha), ("color", colors)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite Gaussian parameters in {name!r}")
    if np.any(alpha < 0) or np.any(alpha >= 1):
        raise NumericError("opacities must lie in [0, 1)")

    cam_R = camera.pose.R
    fx, fy, cx, cy = pixel_focal(camera, (h, w))
    x_cam_all = (mu - camera.pose.t) @ cam_R
    keep_mask = x_cam_all[:, 2] > near
    keep = np.nonzero(keep_mask)[0]

    if len(keep) == 0:
        rgb = np.tile(bg, (h, w, 1))
        out = RenderOutput(rgb, np.zeros((h, w)), np.zeros((h, w)))
        ctx = _empty_ctx(K, h, w)
        return (out, ctx) if want_ctx else out

    x_cam = x_cam_all[keep]
    order = np.argsort(x_cam[:, 2], kind="stable")
    keep = keep[order]
    x_cam = x_cam[order]
    z = x_cam[:, 2]
    rot = quat_rotmats(q[keep])
    s_kept = s[keep]
    M = rot * s_kept[:, None, :]
    sigma_w = np.einsum("kij,klj->kil", M, M)
    sigma_cam = np.einsum("ai,kab,bj->kij", cam_R, sigma_w, cam_R)
    J = jacobians(x_cam, fx, fy, z)
    cov2d = np.einsum("kai,kij,kbj->kab", J, sigma_cam, J)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR
    mean2d = np.stack(
        [fx * x_cam[:, 0] / z + cx, fy * x_cam[:, 1] / z + cy], axis=1
    )
    cov_inv = invert_cov2d(cov2d)
    bboxes = _bboxes(mean2d, cov2d, h, w)
    colors_kept = np.ascontiguousarray(colors[keep])
    alphas_kept = np.ascontiguousarray(alpha[keep])
    mean2d = np.ascontiguousarray(mean2d)
    cov_inv = np.ascontiguousarray(cov_inv)
    depths = np.ascontiguousarray(z)

    rgb, alpha_map, depth_map = kernels.rasterize_forward(
        mean2d, cov_inv, colors_kept, alphas_kept, depths, bboxes, h, w, bg
    )
    out = RenderOutput(rgb, alpha_map, depth_map)
    if not want_ctx:
        return out
    ctx = {
        "num_gaussians": K, "keep": keep, "camera_R": cam_R,
        "x_cam": x_cam, "J": J, "sigma_cam": sigma_cam, "cov_inv": cov_inv,
        "rotmats": rot, "scales": s_kept, "q_raw": q[keep],
        "fx": fx, "fy": fy, "mean2d": mean2d, "colors": colors_kept,
        "alphas": alphas_kept, "depths": depths, "bboxes": bboxes,
        "h": h, "w": w, "bg": bg, "rgb": rgb, "kernels": kernels,
    }
    return out, ctx


def _empty_ctx(K, h, w):
    return {"num_gaussians": K, "empty": True, "h": h, "w": w}


def render(cloud: GaussianCloud, camera: Camera, resolution, bg=None,
           near=DEFAULT_NEAR, want_ctx=False, kernels=None):
    return render_arrays(
        cloud.mu, cloud.q, cloud.s, cloud.alpha, cloud.colors, camera,
        resolution, bg=bg, near=near, want_ctx=want_ctx, kernels=kernels,
    )


def render_backward(ctx, grad_rgb):
    """Gradients of a scalar loss (given dL/drgb) for mu, q, s, alpha, sh.

    Culled Gaussians get zero gradients. The alpha and depth outputs are
    not differentiated (no loss in the pipeline uses them).
    """
    K = ctx["num_gaussians"]
    if ctx.get("empty"):
        return {
            "mu": np.zeros((K, 3)), "q": np.zeros((K, 4)), "s": np.zeros((K, 3)),
            "alpha": np.zeros(K), "sh": np.zeros((K, 1, 3)),
        }
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    d_mean2d, d_cov_inv, d_color, d_alpha = ctx["kernels"].rasterize_backward(
        ctx["mean2d"], ctx["cov_inv"], ctx["colors"], ctx["alphas"],
        ctx["depths"], ctx["bboxes"], ctx["h"], ctx["w"], ctx["bg"],
        np.ascontiguousarray(ctx["rgb"]), grad_rgb,
    )
    return project_backward(ctx, d_mean2d, d_cov_inv, d_alpha, d_color)
