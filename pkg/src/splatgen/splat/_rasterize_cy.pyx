# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rasterization kernels (fast backend).

Semantics are identical to ``_kernels_np``: front-to-back compositing over
depth-sorted Gaussians, per-pixel termination at transmittance < T_MIN and
per-contribution cutoff at Gaussian weight < G_MIN.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

cdef double T_MIN = 1e-4
cdef double G_MIN = 1e-8


def rasterize_forward(double[:, ::1] mean2d, double[:, ::1] cov_inv,
                      double[:, ::1] colors, double[::1] alphas,
                      double[::1] depths, cnp.int64_t[:, ::1] bboxes,
                      int h, int w, double[::1] bg):
    rgb = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    depth_map = np.zeros((h, w))
    trans = np.ones((h, w))
    cdef double[:, :, ::1] rgb_v = rgb
    cdef double[:, ::1] depth_v = depth_map
    cdef double[:, ::1] trans_v = trans
    cdef double[:, ::1] alpha_v = alpha_map
    cdef Py_ssize_t K = mean2d.shape[0]
    cdef Py_ssize_t k, ix, iy
    cdef cnp.int64_t x0, x1, y0, y1
    cdef double a, b, c, mx, my, al, c0, c1, c2, dep
    cdef double dx, dy, power, g, ak, t, contrib

    for k in range(K):
        x0 = bboxes[k, 0]
        x1 = bboxes[k, 1]
        y0 = bboxes[k, 2]
        y1 = bboxes[k, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        a = cov_inv[k, 0]
        b = cov_inv[k, 1]
        c = cov_inv[k, 2]
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        al = alphas[k]
        c0 = colors[k, 0]
        c1 = colors[k, 1]
        c2 = colors[k, 2]
        dep = depths[k]
        for iy in range(y0, y1):
            dy = (iy + 0.5) - my
            for ix in range(x0, x1):
                t = trans_v[iy, ix]
                if t < T_MIN:
                    continue
                dx = (ix + 0.5) - mx
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if power > 0:
                    continue
                g = exp(power)
                if g < G_MIN:
                    continue
                ak = al * g
                contrib = ak * t
                rgb_v[iy, ix, 0] += contrib * c0
                rgb_v[iy, ix, 1] += contrib * c1
                rgb_v[iy, ix, 2] += contrib * c2
                depth_v[iy, ix] += contrib * dep
                trans_v[iy, ix] = t * (1.0 - ak)

    for iy in range(h):
        for ix in range(w):
            t = trans_v[iy, ix]
            alpha_v[iy, ix] = 1.0 - t
            rgb_v[iy, ix, 0] += t * bg[0]
            rgb_v[iy, ix, 1] += t * bg[1]
            rgb_v[iy, ix, 2] += t * bg[2]
    return rgb, alpha_map, depth_map


def rasterize_backward(double[:, ::1] mean2d, double[:, ::1] cov_inv,
                       double[:, ::1] colors, double[::1] alphas,
                       double[::1] depths, cnp.int64_t[:, ::1] bboxes,
                       int h, int w, double[::1] bg,
                       double[:, :, ::1] rgb_out, double[:, :, ::1] grad_rgb):
    cdef Py_ssize_t K = mean2d.shape[0]
    d_mean2d = np.zeros((K, 2))
    d_cov_inv = np.zeros((K, 3))
    d_color = np.zeros((K, 3))
    d_alpha = np.zeros(K)
    trans = np.ones((h, w))
    accum = np.zeros((h, w, 3))
    cdef double[:, ::1] d_mean_v = d_mean2d
    cdef double[:, ::1] d_cinv_v = d_cov_inv
    cdef double[:, ::1] d_color_v = d_color
    cdef double[::1] d_alpha_v = d_alpha
    cdef double[:, ::1] trans_v = trans
    cdef double[:, :, ::1] accum_v = accum
    cdef Py_ssize_t k, ix, iy
    cdef cnp.int64_t x0, x1, y0, y1
    cdef double a, b, c, mx, my, al, c0, c1, c2
    cdef double dx, dy, power, g, ak, t, contrib
    cdef double s0, s1, s2, g0, g1, g2, da, gp, inv_one_minus

    for k in range(K):
        x0 = bboxes[k, 0]
        x1 = bboxes[k, 1]
        y0 = bboxes[k, 2]
        y1 = bboxes[k, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        a = cov_inv[k, 0]
        b = cov_inv[k, 1]
        c = cov_inv[k, 2]
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        al = alphas[k]
        c0 = colors[k, 0]
        c1 = colors[k, 1]
        c2 = colors[k, 2]
        for iy in range(y0, y1):
            dy = (iy + 0.5) - my
            for ix in range(x0, x1):
                t = trans_v[iy, ix]
                if t < T_MIN:
                    continue
                dx = (ix + 0.5) - mx
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if power > 0:
                    continue
                g = exp(power)
                if g < G_MIN:
                    continue
                ak = al * g
                contrib = ak * t
                accum_v[iy, ix, 0] += contrib * c0
                accum_v[iy, ix, 1] += contrib * c1
                accum_v[iy, ix, 2] += contrib * c2
                # suffix contribution after this Gaussian, incl. background
                s0 = rgb_out[iy, ix, 0] - accum_v[iy, ix, 0]
                s1 = rgb_out[iy, ix, 1] - accum_v[iy, ix, 1]
                s2 = rgb_out[iy, ix, 2] - accum_v[iy, ix, 2]
                g0 = grad_rgb[iy, ix, 0]
                g1 = grad_rgb[iy, ix, 1]
                g2 = grad_rgb[iy, ix, 2]
                d_color_v[k, 0] += g0 * contrib
                d_color_v[k, 1] += g1 * contrib
                d_color_v[k, 2] += g2 * contrib
                inv_one_minus = 1.0 / (1.0 - ak)
                da = (g0 * (t * c0 - s0 * inv_one_minus)
                      + g1 * (t * c1 - s1 * inv_one_minus)
                      + g2 * (t * c2 - s2 * inv_one_minus))
                d_alpha_v[k] += da * g
                gp = da * al * g
                d_cinv_v[k, 0] += gp * (-0.5 * dx * dx)
                d_cinv_v[k, 1] += gp * (-dx * dy)
                d_cinv_v[k, 2] += gp * (-0.5 * dy * dy)
                d_mean_v[k, 0] += gp * (a * dx + b * dy)
                d_mean_v[k, 1] += gp * (b * dx + c * dy)
                trans_v[iy, ix] = t * (1.0 - ak)
    return d_mean2d, d_cov_inv, d_color, d_alpha
