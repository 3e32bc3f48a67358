"""Tile rasterizer driver: projection, binning, sorting, chain rules.

The per-pixel compositing work is delegated to a backend kernel module
(compiled when available, numpy otherwise). Everything here is exact
reverse-mode calculus for the projection, SH color and opacity squash,
so render_backward returns true gradients of sum(d_image * image) with
respect to every cloud parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .. import scene as sc
from .._num import sigmoid
from . import _backend

TILE_SIZE = 16
CULL_SIGMA = 3.0
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
EPS_TRANSMITTANCE = 1e-4


@dataclass
class RenderSettings:
    """Rasterization knobs.

    oracle_mode disables the cull radius, the per-splat alpha skip and
    the transmittance early exit so output is comparable to a dense
    reference compositor at full precision.
    """

    tile_size: int = TILE_SIZE
    cull_sigma: float = CULL_SIGMA
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    eps_transmittance: float = EPS_TRANSMITTANCE
    oracle_mode: bool = False
    backend: Optional[str] = None


@dataclass
class CloudGrads:
    """Gradients for every cloud parameter plus densification stats.

    grad_norm_accum holds per-Gaussian magnitudes of the projected-mean
    gradient in half-image units (pixel gradient scaled by W/2, H/2);
    zero for Gaussians not visible in this render.
    """

    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_opacities_raw: np.ndarray
    d_sh: np.ndarray
    grad_norm_accum: np.ndarray
    visible: np.ndarray = None

    def __iadd__(self, other: "CloudGrads") -> "CloudGrads":
        self.d_positions += other.d_positions
        self.d_log_scales += other.d_log_scales
        self.d_opacities_raw += other.d_opacities_raw
        self.d_sh += other.d_sh
        self.grad_norm_accum += other.grad_norm_accum
        if self.visible is not None and other.visible is not None:
            self.visible |= other.visible
        return self

    @classmethod
    def zeros(cls, n: int) -> "CloudGrads":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros(n),
                   np.zeros((n, 3, sc.SH_COEFFS)), np.zeros(n),
                   np.zeros(n, dtype=bool))


@dataclass
class RenderAux:
    """Everything render_backward needs, captured at forward time."""

    camera: sc.Camera
    settings: RenderSettings
    n_total: int
    vis_idx: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    cov2d: np.ndarray
    color: np.ndarray
    color_gate: np.ndarray
    basis: np.ndarray
    viewdir: np.ndarray
    viewdist: np.ndarray
    sh_vis: np.ndarray
    cam_xyz: np.ndarray
    s2: np.ndarray
    eta: np.ndarray
    order: np.ndarray
    tile_ranges: np.ndarray
    tile_coords: np.ndarray
    transmittance: np.ndarray
    last_idx: np.ndarray
    kernels: object
    extras: dict = dc_field(default_factory=dict)


@dataclass
class RenderOutput:
    image: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    aux: RenderAux


def _bin_tiles(mean2d, radius, valid, width, height, tile_size):
    """Assign visible splats to the tiles their 3-sigma box overlaps.

    Returns (splat_ids, tile_ids) pair arrays, unsorted, plus grid dims.
    """
    nx = (width + tile_size - 1) // tile_size
    ny = (height + tile_size - 1) // tile_size
    x0 = np.floor((mean2d[:, 0] - radius) / tile_size).astype(np.int64)
    x1 = np.floor((mean2d[:, 0] + radius) / tile_size).astype(np.int64)
    y0 = np.floor((mean2d[:, 1] - radius) / tile_size).astype(np.int64)
    y1 = np.floor((mean2d[:, 1] + radius) / tile_size).astype(np.int64)
    x0c = np.clip(x0, 0, nx - 1)
    x1c = np.clip(x1, 0, nx - 1)
    y0c = np.clip(y0, 0, ny - 1)
    y1c = np.clip(y1, 0, ny - 1)
    on_screen = valid & (x1 >= 0) & (x0 < nx) & (y1 >= 0) & (y0 < ny)

    counts = np.where(on_screen, (x1c - x0c + 1) * (y1c - y0c + 1), 0)
    total = int(counts.sum())
    splat_ids = np.repeat(np.arange(mean2d.shape[0]), counts)
    if total == 0:
        return splat_ids, np.zeros(0, dtype=np.int64), nx, ny

    # enumerate each splat's covered rectangle in row-major order
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offs, counts)
    w_spans = np.repeat(x1c - x0c + 1, counts)
    dy = local // w_spans
    dx = local - dy * w_spans
    tiles = (np.repeat(y0c, counts) + dy) * nx + np.repeat(x0c, counts) + dx
    return splat_ids, tiles, nx, ny


def render_forward(cloud: sc.GaussianCloud, camera: sc.Camera,
                   settings: Optional[RenderSettings] = None) -> RenderOutput:
    """Differentiable forward render of a cloud from one camera."""
    settings = settings or RenderSettings()
    kernels = _backend.get_kernels(settings.backend)
    height, width = camera.height, camera.width
    tile = settings.tile_size
    bg = np.asarray(camera.background, dtype=np.float64)

    proj = sc.project_cloud(camera, cloud)
    valid = proj["valid"]
    vis_idx = np.nonzero(valid)[0]

    nx = (width + tile - 1) // tile
    ny = (height + tile - 1) // tile
    n_tiles = nx * ny
    ty, tx = np.divmod(np.arange(n_tiles, dtype=np.int64), nx)
    tile_coords = np.stack([tx, ty], axis=1)

    if len(vis_idx) == 0:
        image = np.tile(bg, (height, width, 1))
        aux = RenderAux(camera, settings, cloud.n, vis_idx,
                        np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                        np.zeros((0, 3)), np.zeros((0, 3), dtype=bool),
                        np.zeros((0, sc.SH_COEFFS)), np.zeros((0, 3)),
                        np.zeros(0), np.zeros((0, 3, sc.SH_COEFFS)),
                        np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                        np.zeros(0, dtype=np.int64),
                        np.zeros(n_tiles + 1, dtype=np.int64), tile_coords,
                        np.ones((height, width)), np.full((height, width), -1,
                                                          dtype=np.int64),
                        kernels)
        return RenderOutput(image, np.ones((height, width)),
                            np.zeros((height, width), dtype=np.int32), aux)

    mean2d = np.ascontiguousarray(proj["mean2d"][vis_idx])
    cov = np.ascontiguousarray(proj["cov2d"][vis_idx])
    depth = proj["depth"][vis_idx]
    cam_xyz = np.ascontiguousarray(proj["cam"][vis_idx])
    s2 = np.exp(2.0 * np.asarray(cloud.log_scales, dtype=np.float64))[vis_idx]

    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    conic = np.stack([cov[:, 2] / det, -cov[:, 1] / det, cov[:, 0] / det], axis=1)

    mid = 0.5 * (cov[:, 0] + cov[:, 2])
    disc = np.sqrt(np.maximum(0.25 * (cov[:, 0] - cov[:, 2]) ** 2 + cov[:, 1] ** 2,
                              0.0))
    lam_max = mid + disc
    if settings.oracle_mode:
        # large enough that every splat lands in every tile
        radius = np.full(len(vis_idx), 1e12)
    else:
        radius = np.ceil(settings.cull_sigma * np.sqrt(lam_max))

    # view-dependent colors
    delta = np.asarray(cloud.positions, dtype=np.float64)[vis_idx] - camera.eye
    dist = np.linalg.norm(delta, axis=1)
    viewdir = delta / dist[:, None]
    basis = sc.sh_basis(viewdir)
    sh_vis = np.asarray(cloud.sh, dtype=np.float64)[vis_idx]
    raw_color = 0.5 + np.einsum("nck,nk->nc", sh_vis, basis)
    color = np.clip(raw_color, 0.0, 1.0)
    color_gate = (raw_color > 0.0) & (raw_color < 1.0)

    eta = sigmoid(np.asarray(cloud.opacities_raw, dtype=np.float64))[vis_idx]

    splat_ids, tile_ids, nx, ny = _bin_tiles(
        mean2d, radius, np.ones(len(vis_idx), dtype=bool), width, height, tile)
    order_sort = np.lexsort((splat_ids, depth[splat_ids], tile_ids))
    tile_ids = tile_ids[order_sort]
    order = np.ascontiguousarray(splat_ids[order_sort])
    tile_ranges = np.searchsorted(tile_ids, np.arange(n_tiles + 1)).astype(np.int64)

    use_early_exit = not settings.oracle_mode
    alpha_min = 0.0 if settings.oracle_mode else settings.alpha_min
    image, trans, n_contrib, last_idx = kernels.forward_tiles(
        mean2d, conic, np.ascontiguousarray(color), np.ascontiguousarray(eta),
        order, tile_ranges, tile_coords, height, width, tile, bg,
        alpha_min, settings.alpha_max, settings.eps_transmittance,
        use_early_exit)

    aux = RenderAux(camera, settings, cloud.n, vis_idx, mean2d, conic, cov,
                    color, color_gate, basis, viewdir, dist, sh_vis, cam_xyz,
                    s2, eta, order, tile_ranges, tile_coords, trans, last_idx,
                    kernels)
    return RenderOutput(image, trans, n_contrib.astype(np.int32), aux)


def render_backward(aux: RenderAux, d_image: np.ndarray) -> CloudGrads:
    """Gradients of sum(d_image * image) for every cloud parameter."""
    settings = aux.settings
    camera = aux.camera
    grads = CloudGrads.zeros(aux.n_total)
    if len(aux.vis_idx) == 0:
        return grads
    height, width = camera.height, camera.width
    bg = np.asarray(camera.background, dtype=np.float64)
    use_early_exit = not settings.oracle_mode
    alpha_min = 0.0 if settings.oracle_mode else settings.alpha_min

    d_mean2d, d_quad, d_color, d_eta = aux.kernels.backward_tiles(
        aux.mean2d, aux.conic, np.ascontiguousarray(aux.color),
        np.ascontiguousarray(aux.eta), aux.order, aux.tile_ranges,
        aux.tile_coords, height, width, settings.tile_size, bg,
        alpha_min, settings.alpha_max, settings.eps_transmittance,
        use_early_exit, np.ascontiguousarray(d_image, dtype=np.float64),
        aux.transmittance, aux.last_idx)

    # conic -> cov2d: dL/dSigma = -P G P with G the ddT-weighted moments
    pa, pb, pc = aux.conic[:, 0], aux.conic[:, 1], aux.conic[:, 2]
    g00, g01, g11 = d_quad[:, 0], d_quad[:, 1], d_quad[:, 2]
    m00 = pa * g00 + pb * g01
    m01 = pa * g01 + pb * g11
    m10 = pb * g00 + pc * g01
    m11 = pb * g01 + pc * g11
    x00 = -(m00 * pa + m01 * pb)
    x01 = -(m00 * pb + m01 * pc)
    x11 = -(m10 * pb + m11 * pc)
    d_cov = np.stack([x00, 2.0 * x01, x11], axis=1)

    # cov2d -> (s2, focal ratio a, view-plane slopes tx, ty)
    f = camera.focal
    z = aux.cam_xyz[:, 2]
    a = f / z
    tx = aux.cam_xyz[:, 0] / z
    ty = aux.cam_xyz[:, 1] / z
    s2 = aux.s2
    a2 = a * a
    d_s2 = (d_cov[:, 0] * a2 * (1.0 + tx * tx)
            + d_cov[:, 1] * (-a2 * tx * ty)
            + d_cov[:, 2] * a2 * (1.0 + ty * ty))
    d_a = (d_cov[:, 0] * s2 * 2.0 * a * (1.0 + tx * tx)
           + d_cov[:, 1] * (-2.0 * a * s2 * tx * ty)
           + d_cov[:, 2] * s2 * 2.0 * a * (1.0 + ty * ty))
    d_tx = d_cov[:, 0] * s2 * a2 * 2.0 * tx + d_cov[:, 1] * (-s2 * a2 * ty)
    d_ty = d_cov[:, 2] * s2 * a2 * 2.0 * ty + d_cov[:, 1] * (-s2 * a2 * tx)

    # mean2d = (cx + f tx, cy - f ty)
    d_tx = d_tx + d_mean2d[:, 0] * f
    d_ty = d_ty - d_mean2d[:, 1] * f

    d_cam = np.empty_like(aux.cam_xyz)
    d_cam[:, 0] = d_tx / z
    d_cam[:, 1] = d_ty / z
    d_cam[:, 2] = -(d_tx * tx + d_ty * ty + d_a * a) / z

    rot = camera.rotation()
    d_pos_vis = d_cam @ rot

    # color -> SH coefficients and the view-direction path to position
    gate = aux.color_gate
    dc = np.where(gate, d_color, 0.0)
    d_sh_vis = dc[:, :, None] * aux.basis[:, None, :]
    bgrad = sc.sh_basis_grad(aux.viewdir)
    d_dir = np.einsum("nc,nck,nkj->nj", dc, aux.sh_vis, bgrad)
    proj_t = d_dir - aux.viewdir * np.einsum("nj,nj->n", aux.viewdir, d_dir)[:, None]
    d_pos_vis = d_pos_vis + proj_t / aux.viewdist[:, None]

    d_raw = d_eta * aux.eta * (1.0 - aux.eta)
    d_ls = d_s2 * 2.0 * s2

    vis = aux.vis_idx
    grads.d_positions[vis] = d_pos_vis
    grads.d_log_scales[vis] = d_ls
    grads.d_opacities_raw[vis] = d_raw
    grads.d_sh[vis] = d_sh_vis
    grads.grad_norm_accum[vis] = np.hypot(d_mean2d[:, 0] * 0.5 * width,
                                          d_mean2d[:, 1] * 0.5 * height)
    grads.visible[vis] = True
    return grads
