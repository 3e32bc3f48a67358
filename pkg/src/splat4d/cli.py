"""Command-line entry points.

Subcommands cover the whole workflow: `stage1` synthesizes a static
cloud from text guidance, `stage2` optimizes a deformation field on top
of it, `extend` grows a sequence autoregressively, `render` and
`compose` export frames, and `gradcheck` verifies the hand-derived
gradients against finite differences.

Score providers are selected with `--provider`:

    remote:<url>           wire-protocol endpoint (POST <url>/v1/score)
    analytic:<manifest>    closed-form targets from a JSON manifest

The analytic manifest holds either a constant color or an array target,
both in render range [0, 1]:

    {"seed": 0, "rgb": [0.8, 0.2, 0.2]}
    {"seed": 0, "npy": "target.npy"}

An `npy` path is resolved relative to the manifest file and must be
broadcastable to each request's frame batch, e.g. shape (3,), (H, W, 3)
or (F, H, W, 3).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import guidance
from . import pipeline
from . import schedules

GRADCHECK_TOLERANCES = {"render.": 1e-3, "chain.": 1e-3}
GRADCHECK_DEFAULT_TOL = 1e-6


class BroadcastAnalyticProvider:
    """Analytic scores against a target materialized per request.

    The underlying analytic provider wants a target whose shape equals
    the request's frame batch exactly; this wrapper broadcasts one
    stored target (a constant color or an image) to whatever batch
    geometry each request carries, so a single --provider flag serves
    the multiview, image, and video roles at once.
    """

    def __init__(self, target, seed: int = 0):
        self.target = np.asarray(target, dtype=np.float32)
        self.seed = int(seed)

    def score(self, request):
        shape = np.asarray(request.frames).shape
        try:
            full = np.broadcast_to(self.target, shape)
        except ValueError:
            raise ValueError(
                f"analytic target shape {self.target.shape} does not "
                f"broadcast to the request batch {shape}")
        inner = guidance.AnalyticTargetProvider(
            np.ascontiguousarray(full), seed=self.seed)
        return inner.score(request)


def load_analytic_manifest(path) -> BroadcastAnalyticProvider:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}")
    if not isinstance(manifest, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")
    seed = manifest.get("seed", 0)
    if not isinstance(seed, int):
        raise ValueError(f"{path}: seed must be an integer")
    has_rgb = "rgb" in manifest
    if has_rgb == ("npy" in manifest):
        raise ValueError(f"{path}: provide exactly one of rgb / npy")
    if has_rgb:
        rgb = manifest["rgb"]
        if (not isinstance(rgb, list) or len(rgb) != 3
                or not all(isinstance(v, (int, float)) for v in rgb)):
            raise ValueError(f"{path}: rgb must be three numbers")
        target = np.asarray(rgb, dtype=np.float32)
    else:
        target = np.load(path.parent / manifest["npy"])
        if target.ndim not in (1, 3, 4) or target.shape[-1] != 3:
            raise ValueError(f"{path}: npy target must end in a channel "
                             f"axis of 3, got shape {target.shape}")
    # render range -> model range
    return BroadcastAnalyticProvider(2.0 * target - 1.0, seed=seed)


def build_provider(text: str):
    kind, _, rest = text.partition(":")
    if kind == "analytic" and rest:
        return load_analytic_manifest(rest)
    if kind == "remote" and rest:
        provider = guidance.RemoteProvider(rest)
        health = provider.health()
        if health.get("protocol") != guidance.PROTOCOL:
            raise ValueError(
                f"{rest} speaks {health.get('protocol')!r}, "
                f"need {guidance.PROTOCOL!r}")
        return provider
    raise ValueError(f"bad provider {text!r}: expected "
                     "analytic:<manifest.json> or remote:<url>")


def _load_config(args) -> cf.Config:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cf.load_config(args.config, profile=args.profile,
                          overrides=overrides)


def _progress(total: int):
    step = max(1, total // 20)

    def report(it, _state):
        if (it + 1) % step == 0 or it + 1 == total:
            print(f"  iter {it + 1}/{total}", flush=True)

    return report


def _parse_background(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"background needs r,g,b, got {text!r}")
    return tuple(float(p) for p in parts)


def _cameras(args, width: int, height: int, count: int):
    background = _parse_background(args.background)
    cams = []
    for i in range(count):
        azimuth = args.azimuth + (360.0 * i / count if args.orbit else 0.0)
        cams.append(schedules._orbit_view(
            args.fov, args.elevation, azimuth % 360.0, args.distance,
            width, height, background).camera)
    return cams if args.orbit else cams[0]


def cmd_stage1(args) -> int:
    cfg = _load_config(args)
    provider = build_provider(args.provider)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iters = int(cfg["stage1.iterations"])
    print(f"stage1: {iters} iterations -> {out}", flush=True)
    pipeline.run_stage1(cfg, provider, provider, out_dir=out,
                        progress=_progress(iters))
    print(f"wrote {out / 'stage1.ckpt'}")
    return 0


def cmd_stage2(args) -> int:
    cfg = _load_config(args)
    provider = build_provider(args.provider)
    spec = pipeline.load_spec(args.checkpoint)
    if spec.fields:
        raise ValueError(f"{args.checkpoint} already holds a deformation "
                         "field; use extend to grow the sequence")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iters = int(cfg["stage2.iterations"])
    print(f"stage2: {iters} iterations on {spec.cloud.n} Gaussians "
          f"-> {out}", flush=True)
    pipeline.run_stage2(spec.cloud, cfg, provider, provider, out_dir=out,
                        progress=_progress(iters))
    print(f"wrote {out / 'stage2.ckpt'}")
    return 0


def cmd_extend(args) -> int:
    cfg = _load_config(args)
    provider = build_provider(args.provider)
    spec = pipeline.load_spec(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iters = int(cfg["stage2.iterations"])
    print(f"extend: {iters} iterations, {len(spec.fields)} existing "
          f"segment(s) -> {out}", flush=True)
    pipeline.extend_sequence(spec, cfg, provider, provider, out_dir=out,
                             loop=args.loop, prompt=args.prompt,
                             progress=_progress(iters))
    print(f"wrote {out / 'extend.ckpt'}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    spec = pipeline.load_spec(args.checkpoint)
    if args.eval:
        width = int(cfg["export.eval_width"])
        height = int(cfg["export.eval_height"])
        pad_to = int(cfg["export.pad_to"])
    else:
        width, height, pad_to = args.width, args.height, None
    png = args.png or bool(cfg["export.png"])
    times = np.linspace(0.0, spec.duration, args.frames)
    cameras = _cameras(args, width, height, args.frames)
    out = Path(args.out)
    paths = pipeline.export_frames(spec, cameras, times, out, png=png,
                                   pad_to=pad_to)
    print(f"wrote {len(paths)} frames to {out}")
    return 0


def cmd_compose(args) -> int:
    specs, offsets = [], []
    for entry in args.scene:
        path, _, offset_text = entry.partition(":")
        specs.append(pipeline.load_spec(path))
        if offset_text:
            parts = offset_text.split(",")
            if len(parts) != 3:
                raise ValueError(f"offset needs dx,dy,dz in {entry!r}")
            offsets.append(tuple(float(p) for p in parts))
        else:
            offsets.append((0.0, 0.0, 0.0))
    span = min(spec.duration for spec in specs)
    times = np.linspace(0.0, span, args.frames)
    camera = _cameras(args, args.width, args.height, args.frames)
    out = Path(args.out)
    paths = pipeline.compose_frames(specs, offsets, camera, times, out,
                                    png=args.png)
    print(f"wrote {len(paths)} composed frames to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = pipeline.gradcheck(seed=args.seed if args.seed is not None
                                else 0)
    failures = 0
    for key in sorted(report):
        tol = GRADCHECK_DEFAULT_TOL
        for prefix, value in GRADCHECK_TOLERANCES.items():
            if key.startswith(prefix):
                tol = value
        ok = report[key] <= tol
        failures += not ok
        print(f"{key:26s} {report[key]:10.3e}  (tol {tol:.0e})  "
              f"{'PASS' if ok else 'FAIL'}")
    print(f"gradcheck: {len(report) - failures}/{len(report)} "
          "within tolerance")
    return 1 if failures else 0


def _camera_flags(parser):
    parser.add_argument("--fov", type=float, default=50.0,
                        help="vertical field of view, degrees")
    parser.add_argument("--elevation", type=float, default=15.0)
    parser.add_argument("--azimuth", type=float, default=30.0)
    parser.add_argument("--distance", type=float, default=2.5)
    parser.add_argument("--orbit", action="store_true",
                        help="sweep azimuth over a full turn")
    parser.add_argument("--background", default="0,0,0",
                        help="background color r,g,b in [0,1]")
    parser.add_argument("--frames", type=int, default=schedules.FRAME_COUNT)
    parser.add_argument("--png", action="store_true",
                        help="also write PNG next to each PPM")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splat4d",
        description="text-to-4D score distillation over dynamic Gaussians")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=None,
                        help="key = value overrides, # comments")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", default="default",
                        choices=sorted(cf.PROFILES))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stage1", parents=[common],
                       help="synthesize a static cloud from text")
    p.add_argument("--provider", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_stage1)

    p = sub.add_parser("stage2", parents=[common],
                       help="optimize a deformation field over a cloud")
    p.add_argument("checkpoint", help="stage-1 checkpoint")
    p.add_argument("--provider", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_stage2)

    p = sub.add_parser("extend", parents=[common],
                       help="append an optimized segment to a sequence")
    p.add_argument("checkpoint", help="stage-2 or extended checkpoint")
    p.add_argument("--provider", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loop", action="store_true",
                   help="pin the new segment's last frame to the rest pose")
    p.add_argument("--prompt", default=None,
                   help="replace the prompt for the new segment")
    p.set_defaults(run=cmd_extend)

    p = sub.add_parser("render", parents=[common],
                       help="export frames from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--eval", action="store_true",
                   help="render 512x320 padded onto a 512x512 canvas")
    _camera_flags(p)
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("compose", parents=[common],
                       help="render several sequences into one scene")
    p.add_argument("scene", nargs="+", metavar="CKPT[:dx,dy,dz]",
                   help="checkpoint with an optional world-space offset")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    _camera_flags(p)
    p.set_defaults(run=cmd_compose)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare analytic gradients to finite "
                            "differences")
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
