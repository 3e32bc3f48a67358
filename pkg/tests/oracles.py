"""Independent reference implementations used only by tests.

The brute-force compositor projects and alpha-blends over a single
global depth sort with no tiling, no culling and no early exit, so it
shares none of the rasterizer's fast-path machinery.
"""

from __future__ import annotations

import numpy as np

from splat4d import scene as sc
from splat4d._num import sigmoid


def brute_force_render(cloud: sc.GaussianCloud, camera: sc.Camera,
                       alpha_max: float = 0.99) -> np.ndarray:
    height, width = camera.height, camera.width
    rot = camera.rotation()
    positions = np.asarray(cloud.positions, dtype=np.float64)
    cam = (positions - camera.eye) @ rot.T
    in_front = cam[:, 2] > sc.NEAR_PLANE

    f = camera.focal
    cx, cy = 0.5 * (width - 1), 0.5 * (height - 1)

    means = []
    inv_covs = []
    depths = []
    colors = []
    etas = []
    order_keys = []
    sigma = np.exp(np.asarray(cloud.log_scales, dtype=np.float64))
    eta_all = sigmoid(np.asarray(cloud.opacities_raw, dtype=np.float64))
    for i in np.nonzero(in_front)[0]:
        x, y, z = cam[i]
        jac = np.array([
            [f / z, 0.0, -f * x / z ** 2],
            [0.0, -f / z, f * y / z ** 2],
        ])
        cov = sigma[i] ** 2 * jac @ jac.T + sc.COV2D_LOWPASS * np.eye(2)
        means.append([cx + f * x / z, cy - f * y / z])
        inv_covs.append(np.linalg.inv(cov))
        depths.append(z)
        view = positions[i] - camera.eye
        view = view / np.linalg.norm(view)
        colors.append(sc.eval_sh(np.asarray(cloud.sh, np.float64)[i], view))
        etas.append(eta_all[i])
        order_keys.append(i)

    if not means:
        return np.tile(np.asarray(camera.background, np.float64),
                       (height, width, 1))

    means = np.asarray(means)
    inv_covs = np.asarray(inv_covs)
    depths = np.asarray(depths)
    colors = np.asarray(colors)
    etas = np.asarray(etas)
    sort = np.argsort(depths, kind="stable")

    image = np.empty((height, width, 3))
    bg = np.asarray(camera.background, dtype=np.float64)
    for py in range(height):
        for px in range(width):
            d = np.array([px, py], dtype=np.float64)[None, :] - means[sort]
            q = np.einsum("nj,njk,nk->n", d, inv_covs[sort], d)
            alpha = np.minimum(etas[sort] * np.exp(-0.5 * q), alpha_max)
            t_before = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
            t_final = t_before[-1] * (1.0 - alpha[-1])
            image[py, px] = (colors[sort] * (alpha * t_before)[:, None]).sum(axis=0) \
                + t_final * bg
    return image


def finite_difference(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, reference: np.ndarray,
                active: float = 1e-6) -> float:
    """Worst relative error over coordinates where either side is active."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(reference))
    mask = scale > active
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - reference)[mask] / scale[mask]).max())
