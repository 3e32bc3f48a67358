"""Pure-numpy tile compositing kernels.

Same contract as the compiled module: splats arrive compacted to the
visible set, pre-sorted per tile front to back. All reductions follow
the sequential compositing order, so outputs agree with the scalar
kernels to floating-point roundoff.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _tile_pixels(tx, ty, tile_size, height, width):
    x0 = tx * tile_size
    y0 = ty * tile_size
    xs = np.arange(x0, min(x0 + tile_size, width))
    ys = np.arange(y0, min(y0 + tile_size, height))
    px = np.repeat(xs[None, :], len(ys), axis=0).ravel()
    py = np.repeat(ys[:, None], len(xs), axis=1).ravel()
    return px, py, ys, xs


def _tile_alphas(px, py, mean2d, conic, eta, alpha_min, alpha_max,
                 eps_t, use_early_exit):
    """Per-pixel alphas with skip and early-exit masks applied.

    Returns (alpha_eff, processed, t_before, t_final, dx, dy, g,
    unclamped). processed marks splats that passed the skip test and
    were reached before any early exit; alpha_eff is zero elsewhere.
    """
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    g = np.exp(-0.5 * q)
    alpha_raw = eta[None, :] * g
    alpha = np.minimum(alpha_raw, alpha_max)
    processed = alpha >= alpha_min
    alpha_eff = np.where(processed, alpha, 0.0)

    if use_early_exit:
        t_after = np.cumprod(1.0 - alpha_eff, axis=1)
        below = t_after < eps_t
        # first splat that would cross the floor is dropped, and all after
        stop = np.where(below.any(axis=1), below.argmax(axis=1), alpha_eff.shape[1])
        cols = np.arange(alpha_eff.shape[1])
        before_stop = cols[None, :] < stop[:, None]
        processed = processed & before_stop
        alpha_eff = np.where(before_stop, alpha_eff, 0.0)

    t_after = np.cumprod(1.0 - alpha_eff, axis=1)
    t_before = np.concatenate([np.ones((alpha_eff.shape[0], 1)), t_after[:, :-1]],
                              axis=1)
    t_final = t_after[:, -1] if alpha_eff.shape[1] else np.ones(alpha_eff.shape[0])
    unclamped = alpha_raw < alpha_max
    return alpha_eff, processed, t_before, t_final, dx, dy, g, unclamped


def forward_tiles(mean2d, conic, color, eta, order, tile_ranges, tile_coords,
                  height, width, tile_size, background, alpha_min, alpha_max,
                  eps_t, use_early_exit):
    image = np.empty((height, width, 3))
    image[:] = background[None, None, :]
    trans = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    last_idx = np.full((height, width), -1, dtype=np.int64)

    for t in range(len(tile_coords)):
        r0, r1 = tile_ranges[t], tile_ranges[t + 1]
        tx, ty = tile_coords[t]
        px, py, ys, xs = _tile_pixels(tx, ty, tile_size, height, width)
        if r0 == r1 or len(px) == 0:
            continue
        ids = order[r0:r1]
        alpha_eff, processed, t_before, t_final, _, _, _, _ = _tile_alphas(
            px, py, mean2d[ids], conic[ids], eta[ids],
            alpha_min, alpha_max, eps_t, use_early_exit)
        contrib = alpha_eff * t_before
        tile_img = contrib @ color[ids] + t_final[:, None] * background[None, :]

        sh = (len(ys), len(xs))
        image[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = tile_img.reshape(sh + (3,))
        trans[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = t_final.reshape(sh)
        n_contrib[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = \
            processed.sum(axis=1).reshape(sh)
        has = processed.any(axis=1)
        last_local = np.where(
            has, processed.shape[1] - 1 - processed[:, ::-1].argmax(axis=1), -1)
        last_flat = np.where(has, r0 + last_local, -1)
        last_idx[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = last_flat.reshape(sh)
    return image, trans, n_contrib, last_idx


def backward_tiles(mean2d, conic, color, eta, order, tile_ranges, tile_coords,
                   height, width, tile_size, background, alpha_min, alpha_max,
                   eps_t, use_early_exit, d_image, trans=None, last_idx=None):
    # trans/last_idx are accepted for interface parity with the compiled
    # kernels; the vectorized path rebuilds the same masks instead.
    n_vis = mean2d.shape[0]
    d_mean2d = np.zeros((n_vis, 2))
    d_conic_quad = np.zeros((n_vis, 3))  # sum of dL/dq * (dx^2, dx dy, dy^2)
    d_color = np.zeros((n_vis, 3))
    d_eta = np.zeros(n_vis)

    for t in range(len(tile_coords)):
        r0, r1 = tile_ranges[t], tile_ranges[t + 1]
        tx, ty = tile_coords[t]
        px, py, ys, xs = _tile_pixels(tx, ty, tile_size, height, width)
        if r0 == r1 or len(px) == 0:
            continue
        ids = order[r0:r1]
        alpha_eff, processed, t_before, t_final, dx, dy, g, unclamped = \
            _tile_alphas(px, py, mean2d[ids], conic[ids], eta[ids],
                         alpha_min, alpha_max, eps_t, use_early_exit)
        grad = d_image[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(-1, 3)

        col = color[ids]
        w = alpha_eff[:, :, None] * t_before[:, :, None] * col[None, :, :]
        # colors accumulated behind each splat, background included
        suffix = np.cumsum(w[:, ::-1, :], axis=1)[:, ::-1, :] - w
        suffix += t_final[:, None, None] * background[None, None, :]
        dc_dalpha = t_before[:, :, None] * col[None, :, :] - \
            suffix / (1.0 - alpha_eff[:, :, None])
        d_alpha = np.einsum("pc,pmc->pm", grad, dc_dalpha)
        d_alpha = np.where(processed, d_alpha, 0.0)

        d_color_tile = np.einsum("pc,pm->mc", grad, alpha_eff * t_before)
        gate = processed & unclamped
        d_eta_tile = (d_alpha * g * gate).sum(axis=0)
        d_q = np.where(gate, d_alpha * eta[None, ids] * g * -0.5, 0.0)

        a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
        d_mx = (d_q * -(2.0 * a * dx + 2.0 * b * dy)).sum(axis=0)
        d_my = (d_q * -(2.0 * b * dx + 2.0 * c * dy)).sum(axis=0)
        quad = np.stack([(d_q * dx * dx).sum(axis=0),
                         (d_q * dx * dy).sum(axis=0),
                         (d_q * dy * dy).sum(axis=0)], axis=1)

        np.add.at(d_mean2d, ids, np.stack([d_mx, d_my], axis=1))
        np.add.at(d_conic_quad, ids, quad)
        np.add.at(d_color, ids, d_color_tile)
        np.add.at(d_eta, ids, d_eta_tile)
    return d_mean2d, d_conic_quad, d_color, d_eta
