"""Stochastic sampling policies and the densification controller.

Everything here is a pure function of an explicit random generator so
runs replay exactly from a seed. Angles are degrees, sequence time tau
lives in [0, 1], diffusion time is continuous here and discretized only
at the provider boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import scene as sc
from ._num import logit, sigmoid
from .rasterizer import CloudGrads

FPS_CHOICES = (4, 8, 12)
FPS_PROBS = (0.81, 0.14, 0.05)
FRAME_COUNT = 16
FRAME_SPAN = 3.0  # tau-units covered by 16 frames at 4 fps is 3.0/4

STAGE1_HEIGHT = 256
STAGE1_WIDTH = 256
STAGE2_HEIGHT = 160
STAGE2_WIDTH = 256

GROUP_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)

_UP = np.array([0.0, 1.0, 0.0])
_ORIGIN = np.zeros(3)


def sample_fps_and_times(rng: np.random.Generator, probs=FPS_PROBS):
    """Frame rate plus 16 uniformly spaced frame times inside [0, 1]."""
    fps = int(rng.choice(FPS_CHOICES, p=probs))
    duration = FRAME_SPAN / fps
    start = rng.uniform(0.0, 1.0 - duration)
    times = start + duration * np.arange(FRAME_COUNT) / (FRAME_COUNT - 1)
    return fps, times


def spherical_eye(distance: float, elevation: float,
                  azimuth: float) -> np.ndarray:
    e = np.deg2rad(elevation)
    a = np.deg2rad(azimuth)
    return distance * np.array([np.cos(e) * np.sin(a), np.sin(e),
                                np.cos(e) * np.cos(a)])


@dataclass
class ViewSample:
    """A sampled camera plus the angles that produced it."""

    camera: sc.Camera
    azimuth: float
    elevation: float
    distance: float
    fov: float


def _orbit_view(fov, elevation, azimuth, distance, width, height,
                background) -> ViewSample:
    cam = sc.Camera(eye=spherical_eye(distance, elevation, azimuth),
                    look_at=_ORIGIN.copy(), up=_UP.copy(), fov_y=fov,
                    width=width, height=height,
                    background=np.asarray(background, dtype=np.float64))
    return ViewSample(cam, azimuth, elevation, distance, fov)


def sample_camera_stage1(rng: np.random.Generator,
                         background=(0.0, 0.0, 0.0),
                         width: int = STAGE1_WIDTH,
                         height: int = STAGE1_HEIGHT) -> ViewSample:
    """Static-stage orbit camera looking at the origin."""
    fov = rng.uniform(15.0, 60.0)
    elevation = rng.uniform(10.0, 45.0)
    azimuth = rng.uniform(0.0, 360.0)
    s = rng.uniform(0.8, 1.0)
    distance = s / np.tan(np.deg2rad(fov) / 2.0)
    return _orbit_view(fov, elevation, azimuth, distance,
                       width, height, background)


def sample_view_group_stage1(rng: np.random.Generator,
                             background=(0.0, 0.0, 0.0),
                             width: int = STAGE1_WIDTH,
                             height: int = STAGE1_HEIGHT):
    """Four views at relative azimuths 0/90/180/270, shared elevation."""
    base = sample_camera_stage1(rng, background, width, height)
    return [_orbit_view(base.fov, base.elevation,
                        (base.azimuth + off) % 360.0, base.distance,
                        width, height, background)
            for off in GROUP_AZIMUTHS]


def sample_camera_path_stage2(rng: np.random.Generator,
                              background=(0.0, 0.0, 0.0),
                              width: int = STAGE2_WIDTH,
                              height: int = STAGE2_HEIGHT):
    """16-frame orbit path with linearly ramped angle offsets."""
    fov = rng.uniform(40.0, 70.0)
    elevation = rng.uniform(-10.0, 45.0)
    azimuth = rng.uniform(0.0, 360.0)
    distance = rng.uniform(1.5, 3.0)
    elv_offset = rng.uniform(-13.5, 30.0)
    azm_offset = rng.uniform(-45.0, 45.0)
    views = []
    for i in range(FRAME_COUNT):
        ramp = i / (FRAME_COUNT - 1)
        views.append(_orbit_view(fov, elevation + elv_offset * ramp,
                                 azimuth + azm_offset * ramp, distance,
                                 width, height, background))
    return views


def _blend(a: float, b: float, frac: float) -> float:
    # endpoint-exact linear blend
    return (1.0 - frac) * a + frac * b


def diffusion_time_range(iteration: int, stage: int, model_kind: str,
                         image_steps: int = 6000,
                         multiview_steps: int = 8000) -> Tuple[float, float]:
    """Continuous-time sampling window for one score request."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if stage == 2:
        return 0.02, 0.98
    if stage != 1:
        raise ValueError(f"unknown stage {stage}")
    if model_kind == "image":
        frac = min(iteration / image_steps, 1.0)
        return 0.02, _blend(0.98, 0.5, frac)
    if model_kind == "multiview":
        # anneal from the pure-noise point [0.98, 0.98] outward
        frac = min(iteration / multiview_steps, 1.0)
        return _blend(0.98, 0.02, frac), _blend(0.98, 0.5, frac)
    raise ValueError(f"stage 1 has no {model_kind!r} model")


def sample_diffusion_time(iteration: int, stage: int, model_kind: str,
                          rng: np.random.Generator,
                          image_steps: int = 6000,
                          multiview_steps: int = 8000) -> float:
    lo, hi = diffusion_time_range(iteration, stage, model_kind,
                                  image_steps, multiview_steps)
    return float(rng.uniform(lo, hi))


def view_direction(azimuth: float, elevation: float) -> str:
    """Coarse view label for direction-augmented prompts."""
    if elevation >= 60.0:
        return "overhead"
    azm = azimuth % 360.0
    if azm <= 30.0 or azm >= 330.0:
        return "front"
    if 150.0 <= azm <= 210.0:
        return "back"
    return "side"


def view_prompt(prompt: str, azimuth: float, elevation: float) -> str:
    return f"{prompt}, {view_direction(azimuth, elevation)} view"


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.002
    prune_opacity: float = 0.005
    interval: int = 1000
    warmup: int = 500
    max_gaussians: int = 50000
    opacity_reset_interval: int = 3000
    opacity_reset_cap: float = 0.01
    split_extent_frac: float = 0.01
    split_scale_shrink: float = 1.6

    def __post_init__(self):
        for name in ("grad_threshold", "prune_opacity", "interval", "warmup",
                     "max_gaussians", "opacity_reset_interval",
                     "opacity_reset_cap", "split_extent_frac",
                     "split_scale_shrink"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class DensifyReport:
    """What one controller step did, plus the row provenance map.

    source[i] is the pre-step row index a surviving row came from, or
    -1 for freshly added rows; optimizer state follows this map.
    """

    source: np.ndarray
    densify_ran: bool = False
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    clamped: bool = False

    @property
    def changed(self) -> bool:
        n = self.source.shape[0]
        return bool(self.cloned or self.split or self.pruned or self.clamped
                    or not np.array_equal(self.source, np.arange(n)))


def cloud_extent(cloud: sc.GaussianCloud) -> float:
    """Bounding-box diagonal of the positions; 1.0 for degenerate clouds."""
    if cloud.n == 0:
        return 1.0
    span = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    diag = float(np.linalg.norm(span))
    return diag if diag > 0.0 else 1.0


def densify_prune_step(cloud: sc.GaussianCloud, grads, iteration: int,
                       cfg: DensifyConfig, rng: np.random.Generator,
                       extent: Optional[float] = None):
    """One bookkeeping step: clone/split, prune, periodic opacity cap.

    grads is either a per-Gaussian running mean of 2D-gradient
    magnitudes or a CloudGrads carrying one. Returns (cloud, report);
    the input cloud is never mutated.
    """
    mag = grads.grad_norm_accum if isinstance(grads, CloudGrads) \
        else np.asarray(grads, dtype=np.float64)
    if mag.shape != (cloud.n,):
        raise ValueError("gradient magnitudes must be one per Gaussian")

    pos = cloud.positions
    logs = cloud.log_scales
    opa = cloud.opacities_raw
    sh = cloud.sh
    source = np.arange(cloud.n, dtype=np.int64)
    report = DensifyReport(source=source)

    due_densify = (iteration > 0 and iteration % cfg.interval == 0
                   and iteration >= cfg.warmup)
    if due_densify:
        report.densify_ran = True
        if cloud.n < cfg.max_gaussians:
            cand = np.nonzero(mag > cfg.grad_threshold)[0]
            budget = cfg.max_gaussians - cloud.n
            if cand.size > budget:
                cand = cand[np.argsort(-mag[cand], kind="stable")[:budget]]
                cand = np.sort(cand)
            if cand.size:
                ext = cloud_extent(cloud) if extent is None else extent
                scales = np.exp(np.asarray(logs, np.float64)[cand])
                split_idx = cand[scales > cfg.split_extent_frac * ext]
                clone_idx = cand[scales <= cfg.split_extent_frac * ext]

                keep = np.setdiff1d(source, split_idx, assume_unique=True)
                parts_pos = [pos[keep], pos[clone_idx]]
                parts_logs = [logs[keep], logs[clone_idx]]
                parts_opa = [opa[keep], opa[clone_idx]]
                parts_sh = [sh[keep], sh[clone_idx]]
                srcs = [keep, np.full(clone_idx.size, -1, np.int64)]
                if split_idx.size:
                    axes = rng.standard_normal((split_idx.size, 3))
                    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
                    sigma = np.exp(
                        np.asarray(logs, np.float64)[split_idx])[:, None]
                    for sign in (1.0, -1.0):
                        parts_pos.append(pos[split_idx]
                                         + sign * 0.5 * sigma * axes)
                        parts_logs.append(logs[split_idx]
                                          - np.log(cfg.split_scale_shrink))
                        parts_opa.append(opa[split_idx])
                        parts_sh.append(sh[split_idx])
                        srcs.append(np.full(split_idx.size, -1, np.int64))
                pos = np.concatenate(parts_pos)
                logs = np.concatenate(parts_logs)
                opa = np.concatenate(parts_opa)
                sh = np.concatenate(parts_sh)
                source = np.concatenate(srcs)
                report.cloned = int(clone_idx.size)
                report.split = int(split_idx.size)

        keep_mask = sigmoid(opa) >= cfg.prune_opacity
        report.pruned = int(np.count_nonzero(~keep_mask))
        if report.pruned:
            pos, logs = pos[keep_mask], logs[keep_mask]
            opa, sh = opa[keep_mask], sh[keep_mask]
            source = source[keep_mask]

    if iteration > 0 and iteration % cfg.opacity_reset_interval == 0:
        cap_raw = logit(cfg.opacity_reset_cap)
        if np.any(opa > cap_raw):
            opa = np.minimum(opa, cap_raw)
            report.clamped = True

    if report.changed:
        dtype = cloud.positions.dtype
        cloud = sc.GaussianCloud(np.ascontiguousarray(pos, dtype),
                                 np.ascontiguousarray(logs, dtype),
                                 np.ascontiguousarray(opa, dtype),
                                 np.ascontiguousarray(sh, dtype))
    report.source = source
    return cloud, report


class DensificationController:
    """Accumulates per-render gradient stats and applies the schedule."""

    def __init__(self, cfg: DensifyConfig, n: int):
        self.cfg = cfg
        self.grad_accum = np.zeros(n)
        self.seen = np.zeros(n)

    def observe(self, grads: CloudGrads):
        if grads.grad_norm_accum.shape != self.grad_accum.shape:
            raise ValueError("gradient stats shape drifted from the cloud")
        self.grad_accum += grads.grad_norm_accum
        if grads.visible is not None:
            self.seen += grads.visible
        else:
            self.seen += grads.grad_norm_accum > 0.0

    def mean_magnitude(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.seen, 1.0)

    def step(self, cloud: sc.GaussianCloud, iteration: int,
             rng: np.random.Generator, extent: Optional[float] = None):
        cloud, report = densify_prune_step(cloud, self.mean_magnitude(),
                                           iteration, self.cfg, rng, extent)
        if report.densify_ran:
            # stats restart from scratch after every densification pass
            self.grad_accum = np.zeros(cloud.n)
            self.seen = np.zeros(cloud.n)
        elif report.changed:
            keep = report.source
            self.grad_accum = self.grad_accum[keep]
            self.seen = self.seen[keep]
        return cloud, report
