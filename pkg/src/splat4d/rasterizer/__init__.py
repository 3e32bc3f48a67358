"""Differentiable tile rasterizer for isotropic Gaussian clouds."""

from ._backend import active_backend, available_backends
from ._driver import (ALPHA_MAX, ALPHA_MIN, CULL_SIGMA, EPS_TRANSMITTANCE,
                      TILE_SIZE, CloudGrads, RenderAux, RenderOutput,
                      RenderSettings, render_backward, render_forward)

__all__ = [
    "ALPHA_MAX", "ALPHA_MIN", "CULL_SIGMA", "EPS_TRANSMITTANCE", "TILE_SIZE",
    "CloudGrads", "RenderAux", "RenderOutput", "RenderSettings",
    "active_backend", "available_backends", "render_backward",
    "render_forward",
]
