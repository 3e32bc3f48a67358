# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled tile compositing kernels.

Scalar twin of _kernels_py: identical skip, clamp and early-exit rules,
identical compositing order, so both backends agree to roundoff.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND_NAME = "cython"


def forward_tiles(double[:, ::1] mean2d, double[:, ::1] conic,
                  double[:, ::1] color, double[::1] eta,
                  cnp.int64_t[::1] order, cnp.int64_t[::1] tile_ranges,
                  cnp.int64_t[:, ::1] tile_coords,
                  int height, int width, int tile_size,
                  double[::1] background, double alpha_min, double alpha_max,
                  double eps_t, bint use_early_exit):
    cdef cnp.ndarray[double, ndim=3] image = np.empty((height, width, 3))
    cdef cnp.ndarray[double, ndim=2] trans = np.ones((height, width))
    cdef cnp.ndarray[cnp.int32_t, ndim=2] n_contrib = np.zeros(
        (height, width), dtype=np.int32)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] last_idx = np.full(
        (height, width), -1, dtype=np.int64)

    cdef double[:, :, ::1] img = image
    cdef double[:, ::1] trn = trans
    cdef cnp.int32_t[:, ::1] cnt = n_contrib
    cdef cnp.int64_t[:, ::1] last = last_idx

    cdef Py_ssize_t t, k, i, px, py, x0, y0, x1, y1
    cdef cnp.int64_t r0, r1
    cdef double dx, dy, q, g, alpha, tcur, tnew
    cdef double c0, c1, c2
    cdef int count
    cdef cnp.int64_t last_k
    cdef Py_ssize_t n_tiles = tile_coords.shape[0]

    for t in range(n_tiles):
        r0 = tile_ranges[t]
        r1 = tile_ranges[t + 1]
        x0 = tile_coords[t, 0] * tile_size
        y0 = tile_coords[t, 1] * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                tcur = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                count = 0
                last_k = -1
                for k in range(r0, r1):
                    i = order[k]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    g = exp(-0.5 * q)
                    alpha = eta[i] * g
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    tnew = tcur * (1.0 - alpha)
                    if use_early_exit and tnew < eps_t:
                        break
                    c0 += color[i, 0] * alpha * tcur
                    c1 += color[i, 1] * alpha * tcur
                    c2 += color[i, 2] * alpha * tcur
                    tcur = tnew
                    count += 1
                    last_k = k
                img[py, px, 0] = c0 + tcur * background[0]
                img[py, px, 1] = c1 + tcur * background[1]
                img[py, px, 2] = c2 + tcur * background[2]
                trn[py, px] = tcur
                cnt[py, px] = count
                last[py, px] = last_k
    return image, trans, n_contrib, last_idx


def backward_tiles(double[:, ::1] mean2d, double[:, ::1] conic,
                   double[:, ::1] color, double[::1] eta,
                   cnp.int64_t[::1] order, cnp.int64_t[::1] tile_ranges,
                   cnp.int64_t[:, ::1] tile_coords,
                   int height, int width, int tile_size,
                   double[::1] background, double alpha_min, double alpha_max,
                   double eps_t, bint use_early_exit,
                   double[:, :, ::1] d_image, double[:, ::1] trans,
                   cnp.int64_t[:, ::1] last_idx):
    cdef Py_ssize_t n_vis = mean2d.shape[0]
    cdef cnp.ndarray[double, ndim=2] d_mean2d = np.zeros((n_vis, 2))
    cdef cnp.ndarray[double, ndim=2] d_quad = np.zeros((n_vis, 3))
    cdef cnp.ndarray[double, ndim=2] d_color = np.zeros((n_vis, 3))
    cdef cnp.ndarray[double, ndim=1] d_eta = np.zeros(n_vis)

    cdef double[:, ::1] dm = d_mean2d
    cdef double[:, ::1] dq_acc = d_quad
    cdef double[:, ::1] dc = d_color
    cdef double[::1] de = d_eta

    cdef Py_ssize_t t, i, px, py, x0, y0, x1, y1
    cdef cnp.int64_t r0, r1, k
    cdef double dx, dy, q, g, alpha, alpha_raw, tcur
    cdef double r_0, r_1, r_2, g0, g1, g2
    cdef double d_alpha, dldq, ca, cb, cc
    cdef Py_ssize_t n_tiles = tile_coords.shape[0]

    for t in range(n_tiles):
        r0 = tile_ranges[t]
        r1 = tile_ranges[t + 1]
        if r0 == r1:
            continue
        x0 = tile_coords[t, 0] * tile_size
        y0 = tile_coords[t, 1] * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                k = last_idx[py, px]
                if k < 0:
                    continue
                tcur = trans[py, px]
                r_0 = background[0]
                r_1 = background[1]
                r_2 = background[2]
                g0 = d_image[py, px, 0]
                g1 = d_image[py, px, 1]
                g2 = d_image[py, px, 2]
                while k >= r0:
                    i = order[k]
                    k -= 1
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    ca = conic[i, 0]
                    cb = conic[i, 1]
                    cc = conic[i, 2]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    g = exp(-0.5 * q)
                    alpha_raw = eta[i] * g
                    alpha = alpha_raw
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    tcur = tcur / (1.0 - alpha)
                    d_alpha = (g0 * (tcur * color[i, 0] - tcur * r_0)
                               + g1 * (tcur * color[i, 1] - tcur * r_1)
                               + g2 * (tcur * color[i, 2] - tcur * r_2))
                    dc[i, 0] += g0 * alpha * tcur
                    dc[i, 1] += g1 * alpha * tcur
                    dc[i, 2] += g2 * alpha * tcur
                    r_0 = color[i, 0] * alpha + (1.0 - alpha) * r_0
                    r_1 = color[i, 1] * alpha + (1.0 - alpha) * r_1
                    r_2 = color[i, 2] * alpha + (1.0 - alpha) * r_2
                    if alpha_raw < alpha_max:
                        de[i] += d_alpha * g
                        dldq = d_alpha * eta[i] * g * -0.5
                        dm[i, 0] += dldq * -(2.0 * ca * dx + 2.0 * cb * dy)
                        dm[i, 1] += dldq * -(2.0 * cb * dx + 2.0 * cc * dy)
                        dq_acc[i, 0] += dldq * dx * dx
                        dq_acc[i, 1] += dldq * dx * dy
                        dq_acc[i, 2] += dldq * dy * dy
    return d_mean2d, d_quad, d_color, d_eta
