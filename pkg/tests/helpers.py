"""Shared test utilities, foremost the brute-force reference renderer.

The oracle evaluates every Gaussian at every pixel with plain per-pixel
scalar math (no bounding boxes, no vectorized compositing) and implements
the rasterizer's compositing contract: front-to-back order, termination at
transmittance < 1e-4 and per-contribution cutoff at weight < 1e-8.
"""

import numpy as np

from splatgen.cameras import Camera
from splatgen.splat.cloud import GaussianCloud
from splatgen.splat.project import BLUR_FLOOR, pixel_focal, quat_rotmats

T_MIN = 1e-4
G_MIN = 1e-8


def oracle_render(cloud: GaussianCloud, camera: Camera, resolution, bg=None,
                  near=0.01):
    """O(K * H * W) per-pixel reference renderer."""
    h, w = resolution
    bg = np.zeros(3) if bg is None else np.asarray(bg, dtype=np.float64)
    R = camera.pose.R
    t = camera.pose.t
    fx, fy, cx, cy = pixel_focal(camera, (h, w))
    mu = np.asarray(cloud.mu, dtype=np.float64)
    x_cam = (mu - t) @ R
    in_front = np.nonzero(x_cam[:, 2] > near)[0]
    order = in_front[np.argsort(x_cam[in_front, 2], kind="stable")]

    rot = quat_rotmats(cloud.q)
    lams, means = {}, {}
    for k in order:
        x, y, z = x_cam[k]
        means[k] = (fx * x / z + cx, fy * y / z + cy)
        M = rot[k] * np.asarray(cloud.s[k], dtype=np.float64)[None, :]
        sigma_cam = R.T @ (M @ M.T) @ R
        J = np.array([[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]])
        cov2d = J @ sigma_cam @ J.T + BLUR_FLOOR * np.eye(2)
        lams[k] = np.linalg.inv(cov2d)

    rgb = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    depth_map = np.zeros((h, w))
    colors = np.asarray(cloud.colors, dtype=np.float64)
    for iy in range(h):
        for ix in range(w):
            trans = 1.0
            col = np.zeros(3)
            depth = 0.0
            for k in order:
                if trans < T_MIN:
                    break
                d = np.array([ix + 0.5 - means[k][0], iy + 0.5 - means[k][1]])
                power = -0.5 * d @ lams[k] @ d
                if power > 0:
                    continue
                weight = np.exp(power)
                if weight < G_MIN:
                    continue
                a = float(cloud.alpha[k]) * weight
                col += colors[k] * (a * trans)
                depth += x_cam[k, 2] * (a * trans)
                trans *= 1.0 - a
            rgb[iy, ix] = col + bg * trans
            alpha_map[iy, ix] = 1.0 - trans
            depth_map[iy, ix] = depth
    return rgb, alpha_map, depth_map


def random_cloud(rng, k, dtype=np.float64, z_range=(1.0, 2.8), alpha_max=0.9):
    q = rng.normal(size=(k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        np.column_stack(
            [rng.uniform(-0.5, 0.5, k), rng.uniform(-0.5, 0.5, k),
             rng.uniform(*z_range, k)]
        ).astype(dtype),
        q.astype(dtype),
        rng.uniform(0.04, 0.3, (k, 3)).astype(dtype),
        rng.uniform(0.15, alpha_max, k).astype(dtype),
        rng.uniform(0.05, 0.95, (k, 1, 3)).astype(dtype),
    )


def random_rotation(rng):
    q = rng.normal(size=4)
    from splatgen.cameras import quat_to_matrix

    return quat_to_matrix(q / np.linalg.norm(q))
