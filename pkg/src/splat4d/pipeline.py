"""Optimization loops, sequence blending, composition and export.

Renders live in [0, 1]; score models see [-1, 1]. The mapping
x_model = 2 x - 1 is applied before every request and its factor 2
re-enters the chain rule on the way back. Per-iteration randomness
comes from a generator seeded with (seed, stage, iteration), so a
(config, seed) pair determines every checkpoint byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from . import config as cf
from . import deform
from . import distill
from . import guidance
from . import optim
from . import regularizers as reg
from . import scene as scn
from . import schedules
from .rasterizer import RenderSettings, render_forward

CLOUD_TENSORS = ("positions", "sh_dc", "sh_rest", "opacity", "scaling")


@dataclass
class StageConfig:
    """Everything one optimization loop reads, resolved from a Config."""

    stage: int
    iterations: int
    width: int
    height: int
    seed: int
    prompt: str
    negative_prompt: Optional[str]
    augmented_prompt: Optional[str]
    weights: distill.GuidanceWeights
    schedule: distill.NoiseSchedule
    beta1: float = optim.BETA1
    beta2: float = optim.BETA2
    eps_positions: float = optim.EPS_POSITIONS
    eps_default: float = optim.EPS_DEFAULT
    checkpoint_every: int = 1000
    # static stage
    groups: int = 4
    views_per_group: int = 4
    lr_positions: optim.LrLike = 0.001
    lr_rgb: float = 0.01
    lr_sh: float = 0.0005
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    densify: Optional[schedules.DensifyConfig] = None
    anneal_image_steps: int = 6000
    anneal_multiview_steps: int = 8000
    init_n: int = 1000
    init_radius: float = 0.3
    # motion stage
    paths_per_update: int = 4
    image_subbatch: int = 4
    lambda_jsd: float = 30.0
    lambda_rigidity: float = 100.0
    lambda_interpol: float = 1.0
    knn: int = 40
    lr_field: float = 0.001
    fps_probs: Tuple[float, ...] = schedules.FPS_PROBS
    time_lo: float = 0.02
    time_hi: float = 0.98

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.views_per_group != len(schedules.GROUP_AZIMUTHS):
            raise ValueError("view groups are four-view by construction")
        if not 1 <= self.image_subbatch <= schedules.FRAME_COUNT:
            raise ValueError("image subbatch out of range")


def stage1_config(cfg: cf.Config) -> StageConfig:
    return StageConfig(
        stage=1,
        iterations=int(cfg["stage1.iterations"]),
        width=int(cfg["stage1.width"]),
        height=int(cfg["stage1.height"]),
        seed=cfg.seed(),
        prompt=str(cfg["prompt"]),
        negative_prompt=str(cfg["negative_prompt"]) or None,
        augmented_prompt=str(cfg["augmented_prompt"]) or None,
        weights=cf.guidance_weights_stage1(cfg),
        schedule=cf.noise_schedule_from(cfg),
        beta1=float(cfg["adam.beta1"]), beta2=float(cfg["adam.beta2"]),
        eps_positions=float(cfg["adam.eps_positions"]),
        eps_default=float(cfg["adam.eps_default"]),
        checkpoint_every=int(cfg["checkpoint.every"]),
        groups=int(cfg["stage1.groups"]),
        views_per_group=int(cfg["stage1.views_per_group"]),
        lr_positions=optim.exp_decay(float(cfg["lr.positions_start"]),
                                     float(cfg["lr.positions_end"]),
                                     int(cfg["lr.positions_decay_steps"])),
        lr_rgb=float(cfg["lr.rgb"]), lr_sh=float(cfg["lr.sh"]),
        lr_opacity=float(cfg["lr.opacity"]),
        lr_scaling=float(cfg["lr.scaling"]),
        densify=cf.densify_config_from(cfg),
        anneal_image_steps=int(cfg["stage1.anneal_image_steps"]),
        anneal_multiview_steps=int(cfg["stage1.anneal_multiview_steps"]),
        init_n=int(cfg["init.n_gaussians"]),
        init_radius=float(cfg["init.radius"]))


def stage2_config(cfg: cf.Config) -> StageConfig:
    return StageConfig(
        stage=2,
        iterations=int(cfg["stage2.iterations"]),
        width=int(cfg["stage2.width"]),
        height=int(cfg["stage2.height"]),
        seed=cfg.seed(),
        prompt=str(cfg["prompt"]),
        negative_prompt=str(cfg["negative_prompt"]) or None,
        augmented_prompt=None,
        weights=cf.guidance_weights_stage2(cfg),
        schedule=cf.noise_schedule_from(cfg),
        beta1=float(cfg["adam.beta1"]), beta2=float(cfg["adam.beta2"]),
        eps_positions=float(cfg["adam.eps_positions"]),
        eps_default=float(cfg["adam.eps_default"]),
        checkpoint_every=int(cfg["checkpoint.every"]),
        paths_per_update=int(cfg["stage2.paths_per_update"]),
        image_subbatch=int(cfg["stage2.image_subbatch"]),
        lambda_jsd=float(cfg["stage2.lambda_jsd"]),
        lambda_rigidity=float(cfg["stage2.lambda_rigidity"]),
        lambda_interpol=float(cfg["extend.lambda_interpol"]),
        knn=int(cfg["rigidity.knn"]),
        lr_field=float(cfg["lr.field"]),
        fps_probs=cf.fps_probs(cfg),
        time_lo=float(cfg["stage2.time_lo"]),
        time_hi=float(cfg["stage2.time_hi"]))


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceSpec:
    """A cloud plus the deformation segments that animate it."""

    cloud: scn.GaussianCloud
    fields: List[deform.DeformationField]
    meta: ckpt.SequenceMeta

    @classmethod
    def static(cls, cloud: scn.GaussianCloud) -> "SequenceSpec":
        return cls(cloud, [], ckpt.SequenceMeta([(0.0, 1.0)]))

    @classmethod
    def single(cls, cloud: scn.GaussianCloud,
               fld: deform.DeformationField) -> "SequenceSpec":
        return cls(cloud, [fld], ckpt.SequenceMeta([(0.0, 1.0)]))

    @property
    def duration(self) -> float:
        return self.meta.intervals[-1][1]


def load_spec(path) -> SequenceSpec:
    b = ckpt.load_checkpoint(path)
    meta = b.meta
    if meta is None:
        n_seg = max(len(b.fields), 1)
        meta = ckpt.SequenceMeta([(float(i), float(i + 1))
                                  for i in range(n_seg)],
                                 [(float(i), float(i))
                                  for i in range(1, n_seg)])
    return SequenceSpec(b.cloud, b.fields, meta)


def save_spec(path, spec: SequenceSpec):
    return ckpt.save_checkpoint(path, spec.cloud, spec.fields, spec.meta)


def _local_time(interval: Tuple[float, float], tau: float) -> float:
    t0, t1 = interval
    return min(max((tau - t0) / (t1 - t0), 0.0), 1.0)


def interpolation_weight(overlap: Tuple[float, float], tau: float) -> float:
    """Linear ramp: 0 entering the overlap, 1 leaving it."""
    lo, hi = overlap
    if tau <= lo:
        return 0.0
    if tau >= hi:
        return 1.0
    return (tau - lo) / (hi - lo)


def spec_displacement(spec: SequenceSpec, tau: float,
                      positions: np.ndarray) -> np.ndarray:
    """Displacement at global time tau, blending across overlaps.

    At the ramp endpoints exactly one field is evaluated, so frames at
    a segment seam are bit-identical whichever side claims them.
    """
    if not spec.fields:
        return np.zeros_like(np.asarray(positions, dtype=np.float64))
    active = [i for i, (t0, t1) in enumerate(spec.meta.intervals)
              if t0 <= tau <= t1]
    if not active:
        raise ValueError(f"time {tau} outside the sequence")
    if len(active) == 1:
        i = active[0]
        disp, _ = deform.field_forward(
            spec.fields[i], positions,
            _local_time(spec.meta.intervals[i], tau))
        return disp
    if len(active) != 2 or active[1] != active[0] + 1:
        raise ValueError("more than two segments claim one time")
    i = active[0]
    chi = interpolation_weight(spec.meta.overlaps[i], tau)
    if chi <= 0.0:
        return spec_displacement_segment(spec, i, tau, positions)
    if chi >= 1.0:
        return spec_displacement_segment(spec, i + 1, tau, positions)
    d_a = spec_displacement_segment(spec, i, tau, positions)
    d_b = spec_displacement_segment(spec, i + 1, tau, positions)
    return (1.0 - chi) * d_a + chi * d_b


def spec_displacement_segment(spec: SequenceSpec, index: int, tau: float,
                              positions: np.ndarray) -> np.ndarray:
    disp, _ = deform.field_forward(
        spec.fields[index], positions,
        _local_time(spec.meta.intervals[index], tau))
    return disp


def deformed_cloud(cloud: scn.GaussianCloud,
                   positions: np.ndarray) -> scn.GaussianCloud:
    return scn.GaussianCloud(positions, cloud.log_scales,
                             cloud.opacities_raw, cloud.sh)


def render_spec_frame(spec: SequenceSpec, tau: float, camera: scn.Camera,
                      settings: Optional[RenderSettings] = None) -> np.ndarray:
    base = np.asarray(spec.cloud.positions, dtype=np.float64)
    disp = spec_displacement(spec, tau, base)
    out = render_forward(deformed_cloud(spec.cloud, base + disp), camera,
                         settings)
    return out.image


def cloud_hash(cloud: scn.GaussianCloud) -> str:
    h = hashlib.sha256()
    for arr in (cloud.positions, cloud.log_scales, cloud.opacities_raw,
                cloud.sh):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# shared loop plumbing


class _MetricsWriter:
    def __init__(self, out_dir, name: str):
        self.fh = None
        if out_dir is not None:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            self.fh = open(path / f"metrics_{name}.jsonl", "a",
                           encoding="utf-8")

    def write(self, record: dict):
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _to_model(frames: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(frames, dtype=np.float32)
            - np.float32(1.0)).astype(np.float32)


def _request_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))


def _accumulate_cloud(total, grads):
    if total is None:
        return grads
    total.d_positions += grads.d_positions
    total.d_log_scales += grads.d_log_scales
    total.d_opacities_raw += grads.d_opacities_raw
    total.d_sh += grads.d_sh
    return total


def _save_abort(out_dir, name, cloud, fields=(), meta=None):
    if out_dir is not None:
        ckpt.save_checkpoint(Path(out_dir) / f"{name}_abort.ckpt", cloud,
                             fields, meta)


def _check_prompts(sconf: StageConfig):
    """Weighted terms need the prompts that produce their tensors; fail
    before the loop rather than on the first assembled batch."""
    if sconf.weights.omega_neg != 0.0 and sconf.negative_prompt is None:
        raise ValueError("omega_neg is nonzero but no negative prompt is "
                         "configured")
    if sconf.stage == 1 and sconf.weights.omega_vg != 0.0 \
            and sconf.augmented_prompt is None:
        raise ValueError("omega_vg is nonzero but no augmented prompt is "
                         "configured")


def _merge_image_batches(parts: Sequence[guidance.ScoreBatch],
                         ) -> guidance.ScoreBatch:
    def cat(attr):
        vals = [getattr(p, attr) for p in parts]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals, axis=0)

    return guidance.ScoreBatch(eps_cond=cat("eps_cond"),
                               eps_uncond=cat("eps_uncond"),
                               eps_neg=cat("eps_neg"),
                               eps_aug=cat("eps_aug"),
                               eps_used=cat("eps_used"))


# ---------------------------------------------------------------------------
# stage 1: static synthesis


def run_stage1(cfg: cf.Config, provider_mv: guidance.ScoreProvider,
               provider_im: guidance.ScoreProvider, out_dir=None,
               initial_cloud: Optional[scn.GaussianCloud] = None,
               view_sampler: Optional[Callable] = None,
               progress: Optional[Callable] = None) -> scn.GaussianCloud:
    """Optimize a static cloud against multiview and image scores.

    view_sampler(rng, background) -> list of four-view groups; the
    default draws stage-1 orbit groups at the configured resolution.
    """
    sconf = stage1_config(cfg)
    _check_prompts(sconf)
    cloud = initial_cloud if initial_cloud is not None \
        else scn.init_cloud(sconf.init_n, sconf.init_radius, sconf.seed)

    opt = optim.Adam(sconf.beta1, sconf.beta2)
    opt.register("positions", cloud.positions, sconf.lr_positions,
                 sconf.eps_positions)
    opt.register("sh_dc", cloud.sh[:, :, :1], sconf.lr_rgb,
                 sconf.eps_default)
    opt.register("sh_rest", cloud.sh[:, :, 1:], sconf.lr_sh,
                 sconf.eps_default)
    opt.register("opacity", cloud.opacities_raw, sconf.lr_opacity,
                 sconf.eps_default)
    opt.register("scaling", cloud.log_scales, sconf.lr_scaling,
                 sconf.eps_default)

    controller = schedules.DensificationController(sconf.densify, cloud.n)
    metrics = _MetricsWriter(out_dir, "stage1")
    settings = RenderSettings()

    if view_sampler is None:
        def view_sampler(rng, background):
            return [schedules.sample_view_group_stage1(
                rng, background, sconf.width, sconf.height)
                for _ in range(sconf.groups)]

    try:
        for it in range(sconf.iterations):
            rng = np.random.default_rng([sconf.seed, 1, it])
            shade = float(rng.integers(0, 2))
            background = (shade, shade, shade)
            t_mv = schedules.sample_diffusion_time(
                it, 1, "multiview", rng, sconf.anneal_image_steps,
                sconf.anneal_multiview_steps)
            t_im = schedules.sample_diffusion_time(
                it, 1, "image", rng, sconf.anneal_image_steps,
                sconf.anneal_multiview_steps)
            step_mv = distill.step_from_time(t_mv, sconf.schedule.steps)
            step_im = distill.step_from_time(t_im, sconf.schedule.steps)
            w_mv = distill.time_weight(step_mv, sconf.schedule,
                                       sconf.weights.wt_mode)
            w_im = distill.time_weight(step_im, sconf.schedule,
                                       sconf.weights.wt_mode)
            if abs(w_mv - w_im) > 1e-12:
                raise ValueError("stage-1 assembly expects one shared w(t)")

            total = None
            n_renders = 0
            grad_mag = 0.0
            for group in view_sampler(rng, background):
                outs = [render_forward(cloud, v.camera, settings)
                        for v in group]
                model_frames = _to_model(np.stack([o.image for o in outs]))
                batch_mv = provider_mv.score(guidance.ScoreRequest(
                    frames=model_frames, prompt=sconf.prompt, t=step_mv,
                    model_kind="multiview", seed=_request_seed(rng),
                    negative_prompt=sconf.negative_prompt))
                if sconf.weights.omega_im == 0.0 \
                        and sconf.weights.omega_vg == 0.0:
                    zeros = np.zeros_like(batch_mv.eps_cond)
                    batch_im = guidance.ScoreBatch(eps_cond=zeros,
                                                   eps_uncond=zeros)
                else:
                    parts = []
                    for v, frame in zip(group, model_frames):
                        aug = sconf.augmented_prompt
                        parts.append(provider_im.score(guidance.ScoreRequest(
                            frames=frame[None], t=step_im,
                            model_kind="image", seed=_request_seed(rng),
                            prompt=schedules.view_prompt(
                                sconf.prompt, v.azimuth, v.elevation),
                            augmented_prompt=None if aug is None else
                            schedules.view_prompt(aug, v.azimuth,
                                                  v.elevation))))
                    batch_im = _merge_image_batches(parts)
                d_model = distill.assemble_stage1_gradient(
                    batch_mv, batch_im, sconf.weights, w_mv)
                d_render = 2.0 * d_model
                for out, d_view in zip(outs, d_render):
                    grads = distill.chain_to_parameters(d_view,
                                                        out.aux).cloud
                    controller.observe(grads)
                    total = _accumulate_cloud(total, grads)
                n_renders += len(outs)
                grad_mag += float(np.abs(d_model).mean())

            s = 1.0 / n_renders
            opt.update("positions", cloud.positions, total.d_positions * s)
            opt.update("sh_dc", cloud.sh[:, :, :1],
                       total.d_sh[:, :, :1] * s)
            opt.update("sh_rest", cloud.sh[:, :, 1:],
                       total.d_sh[:, :, 1:] * s)
            opt.update("opacity", cloud.opacities_raw,
                       total.d_opacities_raw * s)
            opt.update("scaling", cloud.log_scales,
                       total.d_log_scales * s)

            cloud, report = controller.step(cloud, it, rng)
            if report.changed:
                for name in CLOUD_TENSORS:
                    opt.remap(name, report.source)

            metrics.write({"iter": it, "n": cloud.n,
                           "loss_guidance": grad_mag / sconf.groups,
                           "t_multiview": t_mv, "t_image": t_im,
                           "fps": None,
                           "densified": bool(report.densify_ran)})
            if out_dir is not None and sconf.checkpoint_every > 0 \
                    and (it + 1) % sconf.checkpoint_every == 0 \
                    and (it + 1) < sconf.iterations:
                ckpt.save_checkpoint(
                    Path(out_dir) / f"stage1_{it + 1:06d}.ckpt", cloud)
            if progress is not None:
                progress(it, cloud)
    except (guidance.TransportError, guidance.ProtocolError):
        _save_abort(out_dir, "stage1", cloud)
        raise
    finally:
        metrics.close()

    if out_dir is not None:
        ckpt.save_checkpoint(Path(out_dir) / "stage1.ckpt", cloud)
    return cloud


# ---------------------------------------------------------------------------
# stage 2: motion synthesis


def _default_path_sampler(sconf: StageConfig):
    def sampler(rng):
        fps, times = schedules.sample_fps_and_times(rng, sconf.fps_probs)
        views = schedules.sample_camera_path_stage2(
            rng, width=sconf.width, height=sconf.height)
        return fps, times, views

    return sampler


def _image_subbatch_gradient(sconf: StageConfig,
                             provider_im: guidance.ScoreProvider,
                             model_frames: np.ndarray, d_model: np.ndarray,
                             rng: np.random.Generator,
                             stats: dict) -> float:
    """Score {middle-of-first-half frame + random extras} with the image
    model and scatter the gradient into the clip gradient in place."""
    if sconf.weights.omega_im == 0.0:
        return 0.0
    frame_count = model_frames.shape[0]
    mid = frame_count // 2 - 1
    extra_n = sconf.image_subbatch - 1
    if extra_n:
        rest = np.array([i for i in range(frame_count) if i != mid])
        sub = np.concatenate([[mid], np.sort(rng.choice(
            rest, size=extra_n, replace=False))])
    else:
        sub = np.array([mid])
    t_im = float(rng.uniform(sconf.time_lo, sconf.time_hi))
    step_im = distill.step_from_time(t_im, sconf.schedule.steps)
    w_im = distill.time_weight(step_im, sconf.schedule,
                               sconf.weights.wt_mode)
    batch_im = provider_im.score(guidance.ScoreRequest(
        frames=model_frames[sub], prompt=sconf.prompt, t=step_im,
        model_kind="image", seed=_request_seed(rng),
        negative_prompt=sconf.negative_prompt))
    part = distill.assemble_image_gradient(batch_im, sconf.weights, w_im)
    d_model[sub] += part
    stats["loss_image"] += float(np.abs(part).mean())
    return t_im


def _field_grad_step(opt: optim.Adam, fld: deform.DeformationField,
                     total: deform.WeightGrads, scale: float):
    params = dict(fld.param_items())
    for name, grad in total.param_items():
        opt.update(name, params[name], grad * scale)


def run_stage2(cloud: scn.GaussianCloud, cfg: cf.Config,
               provider_vid: guidance.ScoreProvider,
               provider_im: guidance.ScoreProvider, out_dir=None,
               field_init: Optional[deform.DeformationField] = None,
               path_sampler: Optional[Callable] = None,
               progress: Optional[Callable] = None,
               ) -> deform.DeformationField:
    """Optimize a deformation field over a frozen cloud.

    path_sampler(rng) -> (fps, times, views with len FRAME_COUNT).
    """
    sconf = stage2_config(cfg)
    _check_prompts(sconf)
    frozen = cloud_hash(cloud)
    base = np.asarray(cloud.positions, dtype=np.float64)
    nn_index = deform.build_nn_index(cloud.positions, k=sconf.knn) \
        if sconf.lambda_rigidity != 0.0 else None
    m0 = reg.cloud_moments(base) if sconf.lambda_jsd != 0.0 else None
    fld = field_init if field_init is not None \
        else cf.field_from(cfg, seed=sconf.seed)

    opt = optim.Adam(sconf.beta1, sconf.beta2)
    for name, arr in fld.param_items():
        opt.register(name, arr, sconf.lr_field, sconf.eps_default)
    if path_sampler is None:
        path_sampler = _default_path_sampler(sconf)
    metrics = _MetricsWriter(out_dir, "stage2")
    settings = RenderSettings()
    frame_count = schedules.FRAME_COUNT

    try:
        for it in range(sconf.iterations):
            rng = np.random.default_rng([sconf.seed, 2, it])
            total = deform.WeightGrads.zeros_like(fld)
            stats = {"loss_video": 0.0, "loss_image": 0.0, "loss_jsd": 0.0,
                     "loss_rigidity": 0.0}
            fps_list = []
            t_vid = t_im = 0.0
            for _ in range(sconf.paths_per_update):
                fps, times, views = path_sampler(rng)
                fps_list.append(int(fps))
                disps, tapes, outs = [], [], []
                for f in range(frame_count):
                    disp, tape = deform.field_forward(fld, base,
                                                      float(times[f]))
                    disps.append(disp)
                    tapes.append(tape)
                    outs.append(render_forward(
                        deformed_cloud(cloud, base + disp),
                        views[f].camera, settings))
                model_frames = _to_model(np.stack([o.image for o in outs]))

                t_vid = float(rng.uniform(sconf.time_lo, sconf.time_hi))
                step_vid = distill.step_from_time(t_vid,
                                                  sconf.schedule.steps)
                w_vid = distill.time_weight(step_vid, sconf.schedule,
                                            sconf.weights.wt_mode)
                batch_vid = provider_vid.score(guidance.ScoreRequest(
                    frames=model_frames, prompt=sconf.prompt, t=step_vid,
                    model_kind="video", fps=fps, seed=_request_seed(rng),
                    negative_prompt=sconf.negative_prompt))
                d_model = distill.assemble_video_gradient(
                    batch_vid, sconf.weights, w_vid)

                stats["loss_video"] += float(np.abs(d_model).mean())
                t_im = _image_subbatch_gradient(sconf, provider_im,
                                                model_frames, d_model, rng,
                                                stats)

                for f in range(frame_count):
                    extra = np.zeros_like(base)
                    if m0 is not None:
                        mt = reg.cloud_moments(base + disps[f])
                        loss_j, d_mean, d_var = reg.jsd_reg(m0, mt)
                        extra += (sconf.lambda_jsd / frame_count) \
                            * reg.moments_backward(base + disps[f], d_mean,
                                                   d_var)
                        stats["loss_jsd"] += sconf.lambda_jsd * loss_j \
                            / frame_count
                    if nn_index is not None:
                        loss_r, d_disp = reg.rigidity_reg(disps[f], nn_index)
                        extra += (sconf.lambda_rigidity / frame_count) \
                            * d_disp
                        stats["loss_rigidity"] += sconf.lambda_rigidity \
                            * loss_r / frame_count
                    pg = distill.chain_to_parameters(
                        2.0 * d_model[f], outs[f].aux,
                        distill.DeformationContext(fld, base,
                                                   float(times[f]),
                                                   tapes[f]),
                        extra)
                    total += pg.field

            _field_grad_step(opt, fld, total, 1.0 / sconf.paths_per_update)
            record = {"iter": it, "n": cloud.n, "fps": fps_list,
                      "t_video": t_vid, "t_image": t_im}
            record.update({k: v / sconf.paths_per_update
                           for k, v in stats.items()})
            metrics.write(record)
            if out_dir is not None and sconf.checkpoint_every > 0 \
                    and (it + 1) % sconf.checkpoint_every == 0 \
                    and (it + 1) < sconf.iterations:
                ckpt.save_checkpoint(
                    Path(out_dir) / f"stage2_{it + 1:06d}.ckpt", cloud,
                    [fld])
            if progress is not None:
                progress(it, fld)
    except (guidance.TransportError, guidance.ProtocolError):
        _save_abort(out_dir, "stage2", cloud, [fld])
        raise
    finally:
        metrics.close()

    if cloud_hash(cloud) != frozen:
        raise RuntimeError("cloud parameters changed during the motion "
                           "stage")
    if out_dir is not None:
        save_spec(Path(out_dir) / "stage2.ckpt",
                  SequenceSpec.single(cloud, fld))
    return fld


# ---------------------------------------------------------------------------
# autoregressive extension


def extend_sequence(spec: SequenceSpec, cfg: cf.Config,
                    provider_vid: guidance.ScoreProvider,
                    provider_im: guidance.ScoreProvider, out_dir=None,
                    loop: bool = False, prompt: Optional[str] = None,
                    field_init: Optional[deform.DeformationField] = None,
                    path_sampler: Optional[Callable] = None,
                    progress: Optional[Callable] = None) -> SequenceSpec:
    """Grow the sequence by one segment seeded at the previous middle.

    The new segment starts at the midpoint of the last one; over the
    shared half the displacement is (1-chi) old + chi new with a linear
    chi, and a seam penalty keeps the blend close to the frozen motion.
    With loop=True the new field is pinned to zero at both time ends so
    the final frame falls back onto the raw cloud.
    """
    if not spec.fields:
        raise ValueError("extension needs an optimized segment")
    sconf = stage2_config(cfg)
    if prompt is not None:
        sconf.prompt = prompt
    _check_prompts(sconf)

    t0_prev, t1_prev = spec.meta.intervals[-1]
    seg_len = t1_prev - t0_prev
    start = t0_prev + 0.5 * seg_len
    interval = (start, start + seg_len)
    overlap = (start, t1_prev)

    cloud = spec.cloud
    frozen = cloud_hash(cloud)
    base = np.asarray(cloud.positions, dtype=np.float64)
    nn_index = deform.build_nn_index(cloud.positions, k=sconf.knn) \
        if sconf.lambda_rigidity != 0.0 else None
    m0 = reg.cloud_moments(base) if sconf.lambda_jsd != 0.0 else None
    gate_mode = deform.GATE_BOTH if loop else deform.GATE_START
    fld = field_init if field_init is not None else cf.field_from(
        cfg, seed=sconf.seed + 101 * len(spec.fields), gate_mode=gate_mode)
    if loop and fld.gate_mode != deform.GATE_BOTH:
        raise ValueError("looping segments need the both-ends gate")

    opt = optim.Adam(sconf.beta1, sconf.beta2)
    for name, arr in fld.param_items():
        opt.register(name, arr, sconf.lr_field, sconf.eps_default)
    if path_sampler is None:
        path_sampler = _default_path_sampler(sconf)
    metrics = _MetricsWriter(out_dir, "extend")
    settings = RenderSettings()
    frame_count = schedules.FRAME_COUNT

    try:
        for it in range(sconf.iterations):
            rng = np.random.default_rng([sconf.seed, 3, it])
            total = deform.WeightGrads.zeros_like(fld)
            stats = {"loss_video": 0.0, "loss_image": 0.0, "loss_jsd": 0.0,
                     "loss_rigidity": 0.0, "loss_interpol": 0.0}
            fps_list = []
            for _ in range(sconf.paths_per_update):
                fps, times, views = path_sampler(rng)
                fps_list.append(int(fps))
                per_frame = []
                for f in range(frame_count):
                    local = float(times[f])
                    tau_g = start + local * seg_len
                    disp_new, tape = deform.field_forward(fld, base, local)
                    chi = interpolation_weight(overlap, tau_g)
                    if chi < 1.0:
                        disp_prev = spec_displacement(spec, tau_g, base)
                        disp_used = (1.0 - chi) * disp_prev \
                            + chi * disp_new if chi > 0.0 else disp_prev
                    else:
                        disp_prev = None
                        disp_used = disp_new
                    out = render_forward(deformed_cloud(cloud,
                                                        base + disp_used),
                                         views[f].camera, settings)
                    per_frame.append((local, chi, disp_prev, disp_used,
                                      tape, out))

                model_frames = _to_model(
                    np.stack([p[5].image for p in per_frame]))
                t_vid = float(rng.uniform(sconf.time_lo, sconf.time_hi))
                step_vid = distill.step_from_time(t_vid,
                                                  sconf.schedule.steps)
                w_vid = distill.time_weight(step_vid, sconf.schedule,
                                            sconf.weights.wt_mode)
                batch_vid = provider_vid.score(guidance.ScoreRequest(
                    frames=model_frames, prompt=sconf.prompt, t=step_vid,
                    model_kind="video", fps=fps, seed=_request_seed(rng),
                    negative_prompt=sconf.negative_prompt))
                d_model = distill.assemble_video_gradient(
                    batch_vid, sconf.weights, w_vid)
                stats["loss_video"] += float(np.abs(d_model).mean())
                _image_subbatch_gradient(sconf, provider_im, model_frames,
                                         d_model, rng, stats)

                for f in range(frame_count):
                    local, chi, disp_prev, disp_used, tape, out = \
                        per_frame[f]
                    if chi <= 0.0:
                        continue    # frozen side owns the frame
                    extra = np.zeros_like(base)
                    if m0 is not None:
                        mt = reg.cloud_moments(base + disp_used)
                        loss_j, d_mean, d_var = reg.jsd_reg(m0, mt)
                        extra += (sconf.lambda_jsd / frame_count) \
                            * reg.moments_backward(base + disp_used,
                                                   d_mean, d_var)
                        stats["loss_jsd"] += sconf.lambda_jsd * loss_j \
                            / frame_count
                    if nn_index is not None:
                        loss_r, d_disp = reg.rigidity_reg(disp_used,
                                                          nn_index)
                        extra += (sconf.lambda_rigidity / frame_count) \
                            * d_disp
                        stats["loss_rigidity"] += sconf.lambda_rigidity \
                            * loss_r / frame_count
                    if disp_prev is not None \
                            and sconf.lambda_interpol != 0.0:
                        loss_i, d_int = reg.interpol_reg(disp_prev,
                                                         disp_used)
                        extra += (sconf.lambda_interpol / frame_count) \
                            * d_int
                        stats["loss_interpol"] += sconf.lambda_interpol \
                            * loss_i / frame_count
                    # displacement chain: d(used)/d(new) = chi
                    pg = distill.chain_to_parameters(
                        chi * 2.0 * d_model[f], out.aux,
                        distill.DeformationContext(fld, base, local, tape),
                        chi * extra)
                    total += pg.field

            _field_grad_step(opt, fld, total, 1.0 / sconf.paths_per_update)
            record = {"iter": it, "n": cloud.n, "fps": fps_list}
            record.update({k: v / sconf.paths_per_update
                           for k, v in stats.items()})
            metrics.write(record)
            if progress is not None:
                progress(it, fld)
    except (guidance.TransportError, guidance.ProtocolError):
        _save_abort(out_dir, "extend", cloud, spec.fields + [fld],
                    spec.meta)
        raise
    finally:
        metrics.close()

    if cloud_hash(cloud) != frozen:
        raise RuntimeError("cloud parameters changed during extension")
    new_meta = ckpt.SequenceMeta(spec.meta.intervals + [interval],
                                 spec.meta.overlaps + [overlap],
                                 loop=loop or spec.meta.loop)
    new_spec = SequenceSpec(cloud, spec.fields + [fld], new_meta)
    if out_dir is not None:
        save_spec(Path(out_dir) / "extend.ckpt", new_spec)
    return new_spec


# ---------------------------------------------------------------------------
# export and composition


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image_u8: np.ndarray):
    h, w, c = image_u8.shape
    if c != 3:
        raise ValueError("P6 needs three channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image_u8).tobytes())


def pad_frame(image: np.ndarray, size: int,
              background) -> np.ndarray:
    """Center the frame on a square canvas filled with the background."""
    h, w, _ = image.shape
    if h > size or w > size:
        raise ValueError("frame larger than the padded canvas")
    fill = np.clip(np.asarray(background, dtype=np.float64), 0.0, 1.0)
    canvas = np.ones((size, size, 3)) * fill
    y0 = (size - h) // 2
    x0 = (size - w) // 2
    canvas[y0:y0 + h, x0:x0 + w] = image
    return canvas


def _camera_record(camera: scn.Camera) -> dict:
    return {"eye": [float(v) for v in camera.eye],
            "look_at": [float(v) for v in camera.look_at],
            "up": [float(v) for v in camera.up],
            "fov_y": float(camera.fov_y),
            "width": int(camera.width), "height": int(camera.height),
            "background": [float(v) for v in camera.background]}


def export_frames(spec: SequenceSpec, cameras, times: Sequence[float],
                  out_dir, png: bool = False, pad_to: Optional[int] = None,
                  settings: Optional[RenderSettings] = None) -> List[Path]:
    """Render the sequence to numbered P6 files plus a manifest.

    cameras is either one camera for every frame or a sequence of the
    same length as times. Output bytes are a pure function of the spec
    and arguments.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_frame = list(cameras) if isinstance(cameras, (list, tuple)) \
        else [cameras] * len(times)
    if len(per_frame) != len(times):
        raise ValueError("need one camera per frame")
    if png:
        try:
            from PIL import Image
        except ImportError as exc:
            raise RuntimeError("PNG export needs Pillow") from exc

    paths = []
    manifest = []
    for i, (tau, cam) in enumerate(zip(times, per_frame)):
        image = render_spec_frame(spec, float(tau), cam, settings)
        if pad_to is not None:
            image = pad_frame(image, pad_to, cam.background)
        data = _to_u8(image)
        path = out / f"frame_{i:04d}.ppm"
        write_ppm(path, data)
        paths.append(path)
        if png:
            Image.fromarray(data).save(out / f"frame_{i:04d}.png")
        manifest.append({"index": i, "tau": float(tau),
                         "camera": _camera_record(cam)})
    (out / "manifest.json").write_text(
        json.dumps({"frames": manifest}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return paths


def merge_at_time(specs: Sequence[SequenceSpec],
                  offsets: Sequence[Sequence[float]],
                  tau: float) -> scn.GaussianCloud:
    """One cloud holding every input deformed at tau and shifted."""
    if len(specs) != len(offsets):
        raise ValueError("need one offset per input")
    if not specs:
        raise ValueError("nothing to merge")
    pos, log_s, opa, sh = [], [], [], []
    for spec, off in zip(specs, offsets):
        base = np.asarray(spec.cloud.positions, dtype=np.float64)
        disp = spec_displacement(spec, tau, base)
        pos.append(base + disp + np.asarray(off, dtype=np.float64))
        log_s.append(np.asarray(spec.cloud.log_scales, dtype=np.float64))
        opa.append(np.asarray(spec.cloud.opacities_raw, dtype=np.float64))
        sh.append(np.asarray(spec.cloud.sh, dtype=np.float64))
    return scn.GaussianCloud(np.concatenate(pos), np.concatenate(log_s),
                             np.concatenate(opa), np.concatenate(sh))


def compose_frames(specs: Sequence[SequenceSpec],
                   offsets: Sequence[Sequence[float]], cameras,
                   times: Sequence[float], out_dir, png: bool = False,
                   settings: Optional[RenderSettings] = None) -> List[Path]:
    """Render several sequences into one shared scene per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_frame = list(cameras) if isinstance(cameras, (list, tuple)) \
        else [cameras] * len(times)
    if len(per_frame) != len(times):
        raise ValueError("need one camera per frame")
    if png:
        try:
            from PIL import Image
        except ImportError as exc:
            raise RuntimeError("PNG export needs Pillow") from exc

    paths = []
    manifest = []
    for i, (tau, cam) in enumerate(zip(times, per_frame)):
        merged = merge_at_time(specs, offsets, float(tau))
        image = render_forward(merged, cam, settings).image
        data = _to_u8(image)
        path = out / f"frame_{i:04d}.ppm"
        write_ppm(path, data)
        paths.append(path)
        if png:
            Image.fromarray(data).save(out / f"frame_{i:04d}.png")
        manifest.append({"index": i, "tau": float(tau),
                         "camera": _camera_record(cam)})
    (out / "manifest.json").write_text(
        json.dumps({"frames": manifest}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# gradient self-check


def _fd_grad(loss_fn, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = loss_fn()
        flat[i] = keep - eps
        lo = loss_fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * eps)
    return g


def _rel_err(analytic: np.ndarray, numeric: np.ndarray,
             floor: float = 1e-5) -> float:
    denom = np.maximum(np.abs(numeric), floor)
    mask = (np.abs(numeric) > floor) | (np.abs(analytic) > floor)
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric) / denom)[mask].max())


def gradcheck(seed: int = 0) -> dict:
    """Finite-difference audit of every backward path; returns the max
    relative error per component."""
    rng = np.random.default_rng(seed)
    report = {}

    n = 5
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cloud = scn.GaussianCloud(
        dirs * rng.uniform(0.05, 0.25, n)[:, None],
        np.log(rng.uniform(0.04, 0.09, n)),
        rng.uniform(-1.0, 1.0, n),
        np.concatenate([rng.normal(0.0, 0.5, (n, 3, 1)),
                        rng.normal(0.0, 0.1, (n, 3, 8))], axis=2))
    cam = scn.Camera(eye=np.array([0.0, 0.3, 2.0]), look_at=np.zeros(3),
                     up=np.array([0.0, 1.0, 0.0]), fov_y=40.0, width=20,
                     height=20, background=np.array([0.2, 0.1, 0.3]))
    settings = RenderSettings(oracle_mode=True)
    w_img = rng.standard_normal((20, 20, 3))

    def render_loss():
        return float((render_forward(cloud, cam, settings).image
                      * w_img).sum())

    out = render_forward(cloud, cam, settings)
    grads = distill.chain_to_parameters(w_img, out.aux).cloud
    for label, arr, g in (("positions", cloud.positions,
                           grads.d_positions),
                          ("log_scales", cloud.log_scales,
                           grads.d_log_scales),
                          ("opacities", cloud.opacities_raw,
                           grads.d_opacities_raw),
                          ("sh", cloud.sh, grads.d_sh)):
        report[f"render.{label}"] = _rel_err(g, _fd_grad(render_loss, arr))

    fld = deform.init_field(hidden=8, layers=3, seed=seed).astype(
        np.float64)
    fld.out_weight = rng.normal(0.0, 0.1, fld.out_weight.shape)
    fld.out_bias = rng.normal(0.0, 0.1, fld.out_bias.shape)
    pos = rng.uniform(-0.4, 0.4, (7, 3))
    w_disp = rng.standard_normal((7, 3))
    tau = 0.63

    def field_loss():
        disp, _ = deform.field_forward(fld, pos, tau)
        return float((disp * w_disp).sum())

    wg, _ = deform.field_backward(fld, pos, tau, w_disp)
    params = dict(fld.param_items())
    worst = 0.0
    for name, g in wg.param_items():
        worst = max(worst, _rel_err(g, _fd_grad(field_loss, params[name])))
    report["field.weights"] = worst

    base = cloud.positions.copy()

    def chain_loss():
        disp_now, _ = deform.field_forward(fld, base, tau)
        moved = scn.GaussianCloud(base + disp_now, cloud.log_scales,
                                  cloud.opacities_raw, cloud.sh)
        return float((render_forward(moved, cam, settings).image
                      * w_img).sum())

    disp0, tape = deform.field_forward(fld, base, tau)
    moved0 = scn.GaussianCloud(base + disp0, cloud.log_scales,
                               cloud.opacities_raw, cloud.sh)
    chained = distill.chain_to_parameters(
        w_img, render_forward(moved0, cam, settings).aux,
        distill.DeformationContext(fld, base, tau, tape))
    worst = 0.0
    for name, g in chained.field.param_items():
        worst = max(worst, _rel_err(g, _fd_grad(chain_loss, params[name])))
    report["chain.field_weights"] = worst

    pts0 = rng.normal(0.0, 0.3, (30, 3))
    pts1 = pts0 + rng.normal(0.0, 0.05, (30, 3))
    m0 = reg.cloud_moments(pts0)

    def jsd_loss():
        loss, _, _ = reg.jsd_reg(m0, reg.cloud_moments(pts1))
        return loss

    _, d_mean, d_var = reg.jsd_reg(m0, reg.cloud_moments(pts1))
    d_pos = reg.moments_backward(pts1, d_mean, d_var)
    report["jsd.positions"] = _rel_err(d_pos, _fd_grad(jsd_loss, pts1))

    disp = rng.normal(0.0, 0.1, (12, 3))
    nn = np.stack([np.delete(np.arange(12), i)[:4] for i in range(12)])

    def rig_loss():
        return reg.rigidity_reg(disp, nn)[0]

    _, d_disp = reg.rigidity_reg(disp, nn)
    report["rigidity.displacements"] = _rel_err(d_disp,
                                                _fd_grad(rig_loss, disp))

    prev = rng.normal(0.0, 0.1, (9, 3))
    blend = prev + rng.normal(0.0, 0.02, (9, 3))

    def interp_loss():
        return reg.interpol_reg(prev, blend)[0]

    _, d_blend = reg.interpol_reg(prev, blend)
    report["interpol.blend"] = _rel_err(d_blend,
                                        _fd_grad(interp_loss, blend))
    return report
