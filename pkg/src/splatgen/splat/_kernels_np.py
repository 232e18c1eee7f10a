"""Pure-NumPy rasterization kernels (fallback backend).

Same compositing contract as the compiled kernel: Gaussians arrive depth
sorted front-to-back; a pixel stops accepting contributions once its
transmittance falls below ``T_MIN``; contributions with Gaussian weight
below ``G_MIN`` are dropped. Bounding boxes are conservative (they contain
every pixel with weight >= G_MIN), so restricting work to them is exact.

Vectorized per Gaussian over its bounding box; the sequential update order
over Gaussians keeps results deterministic.
"""

import numpy as np

T_MIN = 1e-4
G_MIN = 1e-8


def rasterize_forward(mean2d, cov_inv, colors, alphas, depths, bboxes, h, w, bg):
    rgb = np.zeros((h, w, 3))
    depth_map = np.zeros((h, w))
    trans = np.ones((h, w))
    for k in range(len(mean2d)):
        x0, x1, y0, y1 = bboxes[k]
        if x0 >= x1 or y0 >= y1:
            continue
        a, b, c = cov_inv[k]
        dx = (np.arange(x0, x1) + 0.5) - mean2d[k, 0]
        dy = (np.arange(y0, y1) + 0.5) - mean2d[k, 1]
        power = -0.5 * (
            a * dx[None, :] ** 2
            + 2.0 * b * dx[None, :] * dy[:, None]
            + c * dy[:, None] ** 2
        )
        g = np.exp(power)
        tbox = trans[y0:y1, x0:x1]
        valid = (power <= 0) & (g >= G_MIN) & (tbox >= T_MIN)
        contrib = np.where(valid, alphas[k] * g * tbox, 0.0)
        rgb[y0:y1, x0:x1] += contrib[:, :, None] * colors[k]
        depth_map[y0:y1, x0:x1] += contrib * depths[k]
        trans[y0:y1, x0:x1] = np.where(valid, tbox * (1.0 - alphas[k] * g), tbox)
    alpha_map = 1.0 - trans
    rgb += trans[:, :, None] * bg
    return rgb, alpha_map, depth_map


def rasterize_backward(mean2d, cov_inv, colors, alphas, depths, bboxes, h, w, bg,
                       rgb_out, grad_rgb):
    K = len(mean2d)
    d_mean2d = np.zeros((K, 2))
    d_cov_inv = np.zeros((K, 3))
    d_color = np.zeros((K, 3))
    d_alpha = np.zeros(K)
    trans = np.ones((h, w))
    accum = np.zeros((h, w, 3))
    for k in range(K):
        x0, x1, y0, y1 = bboxes[k]
        if x0 >= x1 or y0 >= y1:
            continue
        a, b, c = cov_inv[k]
        dx = (np.arange(x0, x1) + 0.5) - mean2d[k, 0]
        dy = (np.arange(y0, y1) + 0.5) - mean2d[k, 1]
        dxg = np.broadcast_to(dx[None, :], (y1 - y0, x1 - x0))
        dyg = np.broadcast_to(dy[:, None], (y1 - y0, x1 - x0))
        power = -0.5 * (a * dxg**2 + 2.0 * b * dxg * dyg + c * dyg**2)
        g = np.exp(power)
        tbox = trans[y0:y1, x0:x1]
        valid = (power <= 0) & (g >= G_MIN) & (tbox >= T_MIN)
        ak = alphas[k] * g
        contrib = np.where(valid, ak * tbox, 0.0)
        accum[y0:y1, x0:x1] += contrib[:, :, None] * colors[k]
        # suffix contribution after this Gaussian (includes the background)
        suffix = rgb_out[y0:y1, x0:x1] - accum[y0:y1, x0:x1]
        gbox = grad_rgb[y0:y1, x0:x1]
        d_color[k] = np.einsum("yxc,yx->c", gbox, contrib)
        da = np.where(
            valid,
            np.einsum(
                "yxc,yxc->yx",
                gbox,
                tbox[:, :, None] * colors[k] - suffix / (1.0 - ak)[:, :, None],
            ),
            0.0,
        )
        d_alpha[k] = np.sum(da * g)
        gp = np.where(valid, da * alphas[k] * g, 0.0)  # grad w.r.t. power
        d_cov_inv[k, 0] = np.sum(gp * (-0.5 * dxg**2))
        d_cov_inv[k, 1] = np.sum(gp * (-dxg * dyg))
        d_cov_inv[k, 2] = np.sum(gp * (-0.5 * dyg**2))
        d_mean2d[k, 0] = np.sum(gp * (a * dxg + b * dyg))
        d_mean2d[k, 1] = np.sum(gp * (b * dxg + c * dyg))
        trans[y0:y1, x0:x1] = np.where(valid, tbox * (1.0 - ak), tbox)
    return d_mean2d, d_cov_inv, d_color, d_alpha
