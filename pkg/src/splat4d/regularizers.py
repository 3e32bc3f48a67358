"""Distribution, rigidity and seam penalties on deformed clouds.

All three return (loss, gradients) pairs with closed-form gradients;
they are plain functions of displacement or position arrays so the
caller decides how to chain them into field weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MOMENT_FLOOR = 1e-8


@dataclass
class CloudMoments:
    """Per-axis mean and biased variance of positions."""

    mean: np.ndarray
    var: np.ndarray


def cloud_moments(positions: np.ndarray) -> CloudMoments:
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[0] < 2:
        raise ValueError("moments need at least two points")
    mean = pos.mean(axis=0)
    var = np.maximum(pos.var(axis=0), MOMENT_FLOOR)
    return CloudMoments(mean=mean, var=var)


def moments_backward(positions: np.ndarray, d_mean: np.ndarray,
                     d_var: np.ndarray) -> np.ndarray:
    """Chain moment gradients back to positions.

    The variance floor gates its gradient: a floored axis passes
    nothing through d_var.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    mean = pos.mean(axis=0)
    raw_var = pos.var(axis=0)
    gate = raw_var > MOMENT_FLOOR
    d = np.asarray(d_mean, np.float64)[None, :] / n
    d = d + np.where(gate, np.asarray(d_var, np.float64), 0.0)[None, :] \
        * 2.0 * (pos - mean) / n
    return d


def jsd_reg(m0: CloudMoments, mt: CloudMoments):
    """Gaussian-approximation divergence between two clouds' moments.

    Per axis, with nu the means and Gamma the variances:
      -log(2)/2 + log(G0 + Gt)/2 - log(G0)/4 - log(Gt)/4
      + (nt - n0)^2 / (4 (G0 + Gt))
    summed over the three axes. Zero exactly when the moments agree.
    Returns (loss, d_mean_t, d_var_t); gradients flow only to the
    deformed side.
    """
    n0, g0 = m0.mean, m0.var
    nt, gt = mt.mean, mt.var
    s = g0 + gt
    diff = nt - n0
    # algebraically the same as the four-log form; the ratio makes the
    # loss land on exactly zero when the moments agree
    loss_axes = 0.25 * np.log(s * s / (4.0 * g0 * gt)) + 0.25 * diff ** 2 / s
    d_mean = 0.5 * diff / s
    d_var = 0.5 / s - 0.25 / gt - 0.25 * diff ** 2 / s ** 2
    return float(loss_axes.sum()), d_mean, d_var


def rigidity_reg(displacements: np.ndarray, nn_index: np.ndarray):
    """Mean squared displacement difference against precomputed
    neighbors. Returns (loss, d_displacements)."""
    disp = np.asarray(displacements, dtype=np.float64)
    nn = np.asarray(nn_index)
    n, k = nn.shape
    diff = disp[:, None, :] - disp[nn]          # (N, k, 3)
    loss = float((diff ** 2).sum(axis=2).mean())
    scale = 1.0 / (n * k)
    grad = np.zeros_like(disp)
    contrib = 2.0 * scale * diff
    grad += contrib.sum(axis=1)
    np.subtract.at(grad, nn.ravel(), contrib.reshape(-1, 3))
    return loss, grad


def interpol_reg(disp_prev: np.ndarray, disp_interp: np.ndarray):
    """Mean-square seam mismatch between a frozen displacement and the
    blended one. Gradient flows to the blended values only."""
    a = np.asarray(disp_prev, dtype=np.float64)
    b = np.asarray(disp_interp, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("displacement arrays must share a shape")
    diff = b - a
    loss = float((diff ** 2).mean())
    return loss, 2.0 * diff / diff.size
