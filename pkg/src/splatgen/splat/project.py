"""Perspective projection of 3D Gaussians and its analytic backward pass.

Forward: world-space Gaussians -> per-Gaussian 2D means (pixels), 2x2
covariances (first-order Jacobian transform of the 3D covariance, plus a
small isotropic blur floor against sub-pixel aliasing), and camera-space
depths. Backward maps pixel-space gradients from the rasterizer kernel back
to position, quaternion, scale, opacity and color gradients.

All functions are vectorized over K and computed in float64.
"""

import numpy as np

from ..cameras import Camera
from ..errors import ConfigError

BLUR_FLOOR = 0.3  # px^2 added to the 2D covariance diagonal
DEFAULT_NEAR = 0.01


def quat_rotmats(q: np.ndarray) -> np.ndarray:
    """(K, 4) quaternions (not necessarily unit) -> (K, 3, 3) rotations."""
    q = np.asarray(q, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World covariance R diag(s^2) R^T; batched or single."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = q.ndim == 1
    R = quat_rotmats(np.atleast_2d(q))
    s2 = np.atleast_2d(s) ** 2
    sigma = np.einsum("kij,kj,klj->kil", R, s2, R)
    return sigma[0] if single else sigma


def pixel_focal(camera: Camera, resolution):
    h, w = resolution
    fx = camera.intrinsics.f[0] * w
    fy = camera.intrinsics.f[1] * h
    cx = camera.intrinsics.p[0] * w
    cy = camera.intrinsics.p[1] * h
    return fx, fy, cx, cy


def project_gaussian(camera: Camera, mu, sigma, resolution, near=DEFAULT_NEAR):
    """Project world Gaussians: (mean2d px, cov2d px^2, camera depth, in_front).

    Gaussians behind the near plane are flagged, not projected (their rows
    hold the untransformed garbage and must be masked by the caller).
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 2:
        sigma = sigma[None]
    R = camera.pose.R
    t = camera.pose.t
    fx, fy, cx, cy = pixel_focal(camera, resolution)
    x_cam = (mu - t) @ R  # row-vector form of R^T (mu - t)
    z = x_cam[:, 2]
    in_front = z > near
    zs = np.where(in_front, z, 1.0)  # placeholder depth to keep math finite
    u = fx * x_cam[:, 0] / zs + cx
    v = fy * x_cam[:, 1] / zs + cy
    mean2d = np.stack([u, v], axis=1)
    J = jacobians(x_cam, fx, fy, zs)
    sigma_cam = np.einsum("ai,kab,bj->kij", R, sigma, R)  # R^T Sigma R
    cov2d = np.einsum("kai,kij,kbj->kab", J, sigma_cam, J)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR
    return mean2d, cov2d, z, in_front


def jacobians(x_cam, fx, fy, z):
    """(K, 2, 3) Jacobian of pixel coordinates w.r.t. camera-space position."""
    k = len(x_cam)
    J = np.zeros((k, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x_cam[:, 0] / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * x_cam[:, 1] / z**2
    return J


def invert_cov2d(cov2d):
    """Packed inverse (a, b, c) of symmetric 2x2 covariances [[a, b], [b, c]]."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise ConfigError("singular 2D covariance; blur floor should prevent this")
    return np.stack([c / det, -b / det, a / det], axis=1)


def max_eigval_2d(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))


def quat_backward(q_raw, d_rotmat):
    """Gradient through R(q / |q|) given dL/dR; returns dL/dq_raw (K, 4)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    qn = q_raw / np.linalg.norm(q_raw, axis=-1, keepdims=True)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_rotmat  # (K, 3, 3)
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    d_qn = np.stack([dw, dx, dy, dz], axis=1)
    # through the normalization: dq = (I - qn qn^T) d_qn / |q|
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    return (d_qn - np.sum(d_qn * qn, axis=1, keepdims=True) * qn) / norm


def project_backward(ctx, d_mean2d, d_cov_inv, d_alpha, d_color):
    """Map rasterizer gradients back to cloud parameters.

    ``ctx`` is the projection context dict built in render(); gradient
    arrays cover the kept (visible) Gaussians only. Returns dense gradients
    for all K input Gaussians with zeros at culled rows.
    """
    K = ctx["num_gaussians"]
    keep = ctx["keep"]
    cam_R = ctx["camera_R"]
    x_cam = ctx["x_cam"]
    J = ctx["J"]
    sigma_cam = ctx["sigma_cam"]
    cov_inv = ctx["cov_inv"]
    rot = ctx["rotmats"]
    s = ctx["scales"]
    fx, fy = ctx["fx"], ctx["fy"]

    # cov_inv (a, b, c) -> full dL/dLambda, then dL/dcov2d = -Lam G Lam
    lam = np.empty((len(x_cam), 2, 2))
    lam[:, 0, 0] = cov_inv[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = cov_inv[:, 1]
    lam[:, 1, 1] = cov_inv[:, 2]
    g_lam = np.empty_like(lam)
    g_lam[:, 0, 0] = d_cov_inv[:, 0]
    g_lam[:, 0, 1] = g_lam[:, 1, 0] = 0.5 * d_cov_inv[:, 1]
    g_lam[:, 1, 1] = d_cov_inv[:, 2]
    g_cov2d = -np.einsum("kij,kjl,klm->kim", lam, g_lam, lam)

    # cov2d = J sigma_cam J^T (+ const blur floor)
    g_sigma_cam = np.einsum("kai,kab,kbj->kij", J, g_cov2d, J)
    g_J = 2.0 * np.einsum("kab,kbi,kij->kaj", g_cov2d, J, sigma_cam)

    # sigma_cam = R^T sigma_world R
    g_sigma_w = np.einsum("ia,kab,jb->kij", cam_R, g_sigma_cam, cam_R)

    # sigma_world = M M^T with M = rot diag(s)
    g_M = 2.0 * np.einsum("kij,kjl->kil", g_sigma_w, rot * s[:, None, :])
    g_s = np.einsum("kij,kij->kj", rot, g_M)
    g_rot = g_M * s[:, None, :]
    g_q = quat_backward(ctx["q_raw"], g_rot)

    # pixel means: d x_cam += J^T d_mean2d
    g_x = np.einsum("kai,ka->ki", J, d_mean2d)
    # J's own dependence on x_cam
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    g_x[:, 0] += g_J[:, 0, 2] * (-fx / z**2)
    g_x[:, 1] += g_J[:, 1, 2] * (-fy / z**2)
    g_x[:, 2] += (
        g_J[:, 0, 0] * (-fx / z**2)
        + g_J[:, 0, 2] * (2 * fx * x / z**3)
        + g_J[:, 1, 1] * (-fy / z**2)
        + g_J[:, 1, 2] * (2 * fy * y / z**3)
    )
    g_mu_kept = g_x @ cam_R.T

    def scatter(grad_kept, shape):
        out = np.zeros(shape)
        out[keep] = grad_kept
        return out

    return {
        "mu": scatter(g_mu_kept, (K, 3)),
        "q": scatter(g_q, (K, 4)),
        "s": scatter(g_s, (K, 3)),
        "alpha": scatter(d_alpha, (K,)),
        "sh": scatter(d_color, (K, 3))[:, None, :],
    }
