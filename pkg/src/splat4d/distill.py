"""Score assembly: forward diffusion, guidance mixing, backprop routing.

Score providers hand back denoiser predictions for diffused renderings;
this module combines them into per-pixel gradients (classifier-free,
view and negative-prompt guidance plus the motion amplifier) and routes
those gradients through the renderer and, for the dynamic stage, the
deformation field. Assembly is pure and linear in every score tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import deform
from .rasterizer import CloudGrads, RenderAux, render_backward

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving diffusion tables alpha_t^2 + sigma_t^2 = 1."""

    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.alpha.shape != self.sigma.shape or self.alpha.ndim != 1:
            raise ValueError("alpha/sigma must be matching 1-d tables")
        if not np.allclose(self.alpha ** 2 + self.sigma ** 2, 1.0,
                           atol=1e-12):
            raise ValueError("schedule is not variance preserving")
        snr = self.alpha / self.sigma
        if np.any(np.diff(snr) >= 0.0):
            raise ValueError("signal-to-noise ratio must strictly decrease")

    @property
    def steps(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def scaled_linear(cls, steps: int = DEFAULT_STEPS,
                      beta_start: float = DEFAULT_BETA_START,
                      beta_end: float = DEFAULT_BETA_END) -> "NoiseSchedule":
        """Betas linear in sqrt-space, the common image-teacher convention."""
        if steps < 2:
            raise ValueError("need at least two steps")
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end),
                            steps, dtype=np.float64) ** 2
        alpha_bar = np.cumprod(1.0 - betas)
        return cls(np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))


def step_from_time(time: float, steps: int) -> int:
    """Nearest integer step for a normalized diffusion time in [0, 1]."""
    if not 0.0 <= time <= 1.0:
        raise ValueError(f"normalized time {time} outside [0, 1]")
    return int(round(time * (steps - 1)))


def diffuse(frames: np.ndarray, t: int, noise: np.ndarray,
            schedule: NoiseSchedule) -> np.ndarray:
    """Forward-diffused frames alpha_t * x + sigma_t * eps."""
    frames = np.asarray(frames)
    noise = np.asarray(noise)
    if frames.shape != noise.shape:
        raise ValueError("noise shape must match frames")
    if not 0 <= t < schedule.steps:
        raise ValueError(f"step {t} outside [0, {schedule.steps})")
    return schedule.alpha[t] * frames + schedule.sigma[t] * noise


@dataclass
class ScoreBatch:
    """Denoiser outputs for one request, frame axis first.

    eps_used is the noise the provider drew for its own forward
    diffusion; generative (non-classifier) terms need it.
    """

    eps_cond: np.ndarray
    eps_uncond: np.ndarray
    eps_neg: Optional[np.ndarray] = None
    eps_aug: Optional[np.ndarray] = None
    eps_used: Optional[np.ndarray] = None

    def tensors(self):
        named = [("eps_cond", self.eps_cond), ("eps_uncond", self.eps_uncond),
                 ("eps_neg", self.eps_neg), ("eps_aug", self.eps_aug),
                 ("eps_used", self.eps_used)]
        return [(k, v) for k, v in named if v is not None]

    def validate(self) -> "ScoreBatch":
        shape = self.eps_cond.shape
        for name, arr in self.tensors():
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        return self


@dataclass
class GuidanceWeights:
    """Mixing weights for the assembled per-pixel gradients."""

    omega_vid: float = 1.0
    omega_im: float = 1.0
    omega_3d: float = 1.0
    omega_vg: float = 0.0
    omega_neg: float = 0.0
    omega_ma: float = 1.0
    wt_mode: str = "constant"


def time_weight(t: int, schedule: NoiseSchedule,
                mode: str = "constant") -> float:
    # constant is the only shipped mode; magnitudes live in the omegas
    if mode == "constant":
        return 1.0
    raise ValueError(f"unknown time-weight mode {mode!r}")


def motion_amplify(scores: np.ndarray, omega_ma: float) -> np.ndarray:
    """Scale per-frame deviation from the frame mean by omega_ma."""
    scores = np.asarray(scores)
    if scores.ndim < 1 or scores.shape[0] < 1:
        raise ValueError("need a leading frame axis")
    if omega_ma == 1.0:
        return scores.copy()
    mean = scores.mean(axis=0, keepdims=True)
    return mean + omega_ma * (scores - mean)


def _classifier_delta(batch: ScoreBatch, mode: str) -> np.ndarray:
    delta = np.asarray(batch.eps_cond, np.float64) \
        - np.asarray(batch.eps_uncond, np.float64)
    if mode == "sds":
        if batch.eps_used is None:
            raise ValueError("sds mode needs the provider noise eps_used")
        delta = delta + (np.asarray(batch.eps_cond, np.float64)
                         - np.asarray(batch.eps_used, np.float64))
    elif mode != "csd":
        raise ValueError(f"unknown distillation mode {mode!r}")
    return delta


def _negative_delta(batch: ScoreBatch) -> np.ndarray:
    if batch.eps_neg is None:
        raise ValueError("omega_neg != 0 but the batch has no eps_neg")
    return np.asarray(batch.eps_uncond, np.float64) \
        - np.asarray(batch.eps_neg, np.float64)


def assemble_video_gradient(batch: ScoreBatch, weights: GuidanceWeights,
                            w_t: float, mode: str = "csd") -> np.ndarray:
    """Dynamic-stage video gradient: guidance mix, amplifier, scaling."""
    batch.validate()
    delta = _classifier_delta(batch, mode)
    if weights.omega_neg != 0.0:
        delta = delta + weights.omega_neg * _negative_delta(batch)
    delta = motion_amplify(delta, weights.omega_ma)
    return (w_t * weights.omega_vid) * delta


def assemble_image_gradient(batch: ScoreBatch, weights: GuidanceWeights,
                            w_t: float, mode: str = "csd") -> np.ndarray:
    """Per-frame image gradient: no amplifier, no negative term."""
    batch.validate()
    return (w_t * weights.omega_im) * _classifier_delta(batch, mode)


def assemble_stage1_gradient(batch_3d: ScoreBatch, batch_im: ScoreBatch,
                             weights: GuidanceWeights, w_t: float,
                             mode: str = "csd") -> np.ndarray:
    """Static-stage per-view gradient from the multiview and image scores.

    The negative-prompt term rides on the multiview scores only and the
    view-guidance term on the image scores only.
    """
    batch_3d.validate()
    batch_im.validate()
    if batch_3d.eps_cond.shape != batch_im.eps_cond.shape:
        raise ValueError("multiview and image score shapes differ")
    total = weights.omega_3d * _classifier_delta(batch_3d, mode) \
        + weights.omega_im * _classifier_delta(batch_im, mode)
    if weights.omega_vg != 0.0:
        if batch_im.eps_aug is None:
            raise ValueError("omega_vg != 0 but the image batch has no "
                             "eps_aug")
        total = total + weights.omega_vg * (
            np.asarray(batch_im.eps_aug, np.float64)
            - np.asarray(batch_im.eps_cond, np.float64))
    if weights.omega_neg != 0.0:
        total = total + weights.omega_neg * _negative_delta(batch_3d)
    return w_t * total


@dataclass
class DeformationContext:
    """Ties a render to the field evaluation that produced its positions."""

    field: deform.DeformationField
    base_positions: np.ndarray
    tau: float
    tape: Optional[deform.FieldTape] = None


@dataclass
class ParamGrads:
    """Routed gradients; exactly one side is set per stage."""

    cloud: Optional[CloudGrads] = None
    field: Optional[deform.WeightGrads] = None


def chain_to_parameters(d_image: np.ndarray, aux: RenderAux,
                        deformation: Optional[DeformationContext] = None,
                        extra_d_displacements: Optional[np.ndarray] = None,
                        ) -> ParamGrads:
    """Route a per-pixel gradient down to trainable parameters.

    Without a deformation context this is the static stage: cloud
    parameter gradients come straight from the renderer. With one, the
    position gradient (plus any displacement-space extras such as
    regularizer terms) continues into the field weights and the cloud
    stays frozen.
    """
    cloud_grads = render_backward(aux, d_image)
    if deformation is None:
        if extra_d_displacements is not None:
            raise ValueError("displacement extras need a deformation "
                             "context")
        return ParamGrads(cloud=cloud_grads)
    d_disp = cloud_grads.d_positions
    if extra_d_displacements is not None:
        d_disp = d_disp + extra_d_displacements
    weight_grads, _ = deform.field_backward(
        deformation.field, deformation.base_positions, deformation.tau,
        d_disp, deformation.tape)
    return ParamGrads(field=weight_grads)
