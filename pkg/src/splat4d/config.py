"""Run configuration: flat key-value files, profiles, builders.

The file format is deliberately dumb: UTF-8 text, one `key = value`
per line, `#` starts a comment, later lines win. Every key must be
known; values are coerced to the type of the default. Geometry ranges
baked into the samplers and rasterizer internals are contracts, not
knobs, and have no keys here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

from . import deform
from . import distill
from . import schedules

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "prompt": "",
    "negative_prompt": "",
    "augmented_prompt": "",

    "init.n_gaussians": 1000,
    "init.radius": 0.3,

    "diffusion.steps": 1000,
    "diffusion.beta_start": 8.5e-4,
    "diffusion.beta_end": 1.2e-2,

    "stage1.iterations": 10000,
    "stage1.width": 256,
    "stage1.height": 256,
    "stage1.groups": 4,
    "stage1.views_per_group": 4,
    "stage1.omega_3d": 1.6,
    "stage1.omega_im": 0.4,
    "stage1.omega_vg": 3.0,
    "stage1.omega_neg": 0.8,
    "stage1.anneal_image_steps": 6000,
    "stage1.anneal_multiview_steps": 8000,

    "stage2.iterations": 10000,
    "stage2.width": 256,
    "stage2.height": 160,
    "stage2.paths_per_update": 4,
    "stage2.image_subbatch": 4,
    "stage2.lambda_jsd": 30.0,
    "stage2.lambda_rigidity": 100.0,
    "stage2.omega_vid": 1.0,
    "stage2.omega_im": 1.0,
    "stage2.omega_ma": 24.0,
    "stage2.omega_neg": 0.8,
    "stage2.time_lo": 0.02,
    "stage2.time_hi": 0.98,

    "extend.lambda_interpol": 1.0,

    "lr.positions_start": 0.001,
    "lr.positions_end": 0.0002,
    "lr.positions_decay_steps": 500,
    "lr.rgb": 0.01,
    "lr.sh": 0.0005,
    "lr.opacity": 0.05,
    "lr.scaling": 0.005,
    "lr.field": 0.001,

    "adam.beta1": 0.9,
    "adam.beta2": 0.999,
    "adam.eps_positions": 1e-15,
    "adam.eps_default": 1e-8,

    "fps.p4": 0.81,
    "fps.p8": 0.14,
    "fps.p12": 0.05,

    "densify.grad_threshold": 0.002,
    "densify.prune_opacity": 0.005,
    "densify.interval": 1000,
    "densify.warmup": 500,
    "densify.max_gaussians": 50000,
    "densify.opacity_reset_interval": 3000,
    "densify.opacity_reset_cap": 0.01,
    "densify.split_extent_frac": 0.01,
    "densify.split_scale_shrink": 1.6,

    "field.hidden": 128,
    "field.layers": 5,
    "field.frequencies": 4,
    "field.gate_exponent": 0.35,
    "field.clamp_half": 0.5,

    "rigidity.knn": 40,

    "checkpoint.every": 1000,
    "export.png": False,
    "export.eval_width": 512,
    "export.eval_height": 320,
    "export.pad_to": 512,
}

PROFILES: Dict[str, Dict[str, object]] = {
    "default": {},
    "ablation": {
        "stage2.iterations": 4000,
    },
    # continued refinement pass: higher resolution, rates / 5, cap
    # lifted so densification keeps going
    "finetune": {
        "stage1.iterations": 7000,
        "stage2.iterations": 3000,
        "stage1.width": 512,
        "stage1.height": 512,
        "densify.max_gaussians": 100000,
        "lr.positions_start": 0.001 * 0.2,
        "lr.positions_end": 0.0002 * 0.2,
        "lr.rgb": 0.01 * 0.2,
        "lr.sh": 0.0005 * 0.2,
        "lr.opacity": 0.05 * 0.2,
        "lr.scaling": 0.005 * 0.2,
        "lr.field": 0.001 * 0.2,
    },
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw, 0)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}")
    return raw


def parse_text(text: str) -> Dict[str, object]:
    """Key-value lines to a coerced dict; unknown keys are errors."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected 'key = value', "
                             f"got {line.strip()!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if key not in DEFAULTS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass(frozen=True)
class Config:
    values: Mapping[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    def seed(self) -> int:
        return int(self.values["seed"])


def load_config(path=None, profile: str = "default",
                overrides: Optional[Mapping[str, object]] = None) -> Config:
    """DEFAULTS <- profile <- file <- overrides, later layers winning."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r} (have "
                         f"{', '.join(sorted(PROFILES))})")
    values = dict(DEFAULTS)
    values.update(PROFILES[profile])
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    if overrides:
        for key in overrides:
            if key not in DEFAULTS:
                raise ValueError(f"unknown key {key!r}")
        values.update(overrides)
    cfg = Config(values)
    _validate(cfg)
    return cfg


def _validate(cfg: Config):
    v = cfg.values
    for key in ("stage1.iterations", "stage2.iterations"):
        if v[key] < 1:
            raise ValueError(f"{key} must be >= 1")
    for key, val in v.items():
        if key.startswith("lr.") and val <= 0:
            raise ValueError(f"{key} must be > 0")
    p = fps_probs(cfg)
    if min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
        raise ValueError("fps.p4/p8/p12 must be a probability vector")
    if not 0.0 <= v["stage2.time_lo"] < v["stage2.time_hi"] <= 1.0:
        raise ValueError("stage2 time window must be ordered inside [0, 1]")


def config_to_text(cfg: Config) -> str:
    """Canonical render: every key, sorted, one per line."""
    lines = []
    for key in sorted(cfg.values):
        val = cfg.values[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def fps_probs(cfg: Config):
    return (float(cfg["fps.p4"]), float(cfg["fps.p8"]),
            float(cfg["fps.p12"]))


def noise_schedule_from(cfg: Config) -> distill.NoiseSchedule:
    return distill.NoiseSchedule.scaled_linear(
        steps=int(cfg["diffusion.steps"]),
        beta_start=float(cfg["diffusion.beta_start"]),
        beta_end=float(cfg["diffusion.beta_end"]))


def densify_config_from(cfg: Config) -> schedules.DensifyConfig:
    return schedules.DensifyConfig(
        grad_threshold=float(cfg["densify.grad_threshold"]),
        prune_opacity=float(cfg["densify.prune_opacity"]),
        interval=int(cfg["densify.interval"]),
        warmup=int(cfg["densify.warmup"]),
        max_gaussians=int(cfg["densify.max_gaussians"]),
        opacity_reset_interval=int(cfg["densify.opacity_reset_interval"]),
        opacity_reset_cap=float(cfg["densify.opacity_reset_cap"]),
        split_extent_frac=float(cfg["densify.split_extent_frac"]),
        split_scale_shrink=float(cfg["densify.split_scale_shrink"]))


def guidance_weights_stage1(cfg: Config) -> distill.GuidanceWeights:
    return distill.GuidanceWeights(
        omega_3d=float(cfg["stage1.omega_3d"]),
        omega_im=float(cfg["stage1.omega_im"]),
        omega_vg=float(cfg["stage1.omega_vg"]),
        omega_neg=float(cfg["stage1.omega_neg"]))


def guidance_weights_stage2(cfg: Config) -> distill.GuidanceWeights:
    return distill.GuidanceWeights(
        omega_vid=float(cfg["stage2.omega_vid"]),
        omega_im=float(cfg["stage2.omega_im"]),
        omega_ma=float(cfg["stage2.omega_ma"]),
        omega_neg=float(cfg["stage2.omega_neg"]))


def field_from(cfg: Config, seed: int,
               gate_mode: str = deform.GATE_START) -> deform.DeformationField:
    f = deform.init_field(hidden=int(cfg["field.hidden"]),
                          layers=int(cfg["field.layers"]),
                          seed=seed,
                          frequencies=int(cfg["field.frequencies"]),
                          gate_mode=gate_mode)
    f.gate_exponent = float(cfg["field.gate_exponent"])
    f.clamp_half = float(cfg["field.clamp_half"])
    return f
