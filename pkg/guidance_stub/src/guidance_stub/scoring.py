"""Score computation for the ayg-score/1 protocol.

Two modes.  ``analytic`` treats a fixed target image as the clean sample and
returns the exact conditional score for it; clients running the same formulas
in process get byte-identical tensors, which is what makes the stub useful as
an end-to-end transport check.  ``echo-zeros`` returns all-zero tensors of the
requested shape and is enough to exercise a client loop without moving it.

Everything here is float32 with float64 schedule tables, and the operation
order is fixed.  Do not "simplify" the arithmetic: reassociating it changes
the low bits and breaks equivalence with in-process providers.
"""

from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

PROTOCOL = "ayg-score/1"

SCHEDULE_STEPS = 1000
BETA_START = 8.5e-4
BETA_END = 1.2e-2

MODEL_KINDS = ("video", "image", "multiview")
VIDEO_FRAMES = 16
MULTIVIEW_FRAMES = 4

_MAX_PAYLOAD_ELEMENTS = 1 << 28


class RequestError(Exception):
    """Malformed or semantically invalid request; maps to HTTP 400."""


class ProtocolMismatch(Exception):
    """Client speaks a different protocol version; maps to HTTP 426."""


def schedule_tables(steps: int = SCHEDULE_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Return (alpha, sigma) lookup tables for the scaled-linear schedule."""
    # linspace in sqrt space, then square: same construction as the client.
    betas = np.linspace(np.sqrt(BETA_START), np.sqrt(BETA_END), steps, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    return np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)


def encode_f32(array: np.ndarray) -> str:
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return base64.b64encode(data).decode("ascii")


def decode_f32(text: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, TypeError) as exc:
        raise RequestError(f"invalid base64 payload: {exc}") from exc
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise RequestError(
            f"payload holds {len(raw)} bytes, shape {list(shape)} needs {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def load_manifest(path: str | Path) -> tuple[np.ndarray, int]:
    """Load a target manifest and return (model-range target, seed).

    The manifest is a JSON object with an integer ``seed`` and exactly one
    of ``rgb`` (three numbers in [0, 1]) or ``npy`` (array path relative to
    the manifest, trailing axis of size 3).  Values are render-range and get
    mapped to model range as 2x - 1.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")
    seed = spec.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ValueError(f"{path}: 'seed' must be a non-negative integer")
    has_rgb = "rgb" in spec
    has_npy = "npy" in spec
    if has_rgb == has_npy:
        raise ValueError(f"{path}: provide exactly one of 'rgb' or 'npy'")
    if has_rgb:
        rgb = spec["rgb"]
        if not (isinstance(rgb, list) and len(rgb) == 3
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rgb)):
            raise ValueError(f"{path}: 'rgb' must be a list of three numbers")
        target = np.asarray(rgb, dtype=np.float32)
    else:
        array_path = path.parent / spec["npy"]
        target = np.load(array_path)
        if target.ndim < 1 or target.shape[-1] != 3:
            raise ValueError(f"{array_path}: last axis must have size 3")
        target = np.asarray(target, dtype=np.float32)
    # Promotes to float64, matching the in-process conversion exactly.
    model = np.asarray(2.0 * target - 1.0, dtype=np.float32)
    return model, seed


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise RequestError(message)


def parse_request(body: bytes) -> dict:
    """Decode and validate a score request; frames come back as float32."""
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RequestError(f"request body is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise RequestError("request body must be a JSON object")

    protocol = payload.get("protocol")
    if protocol is None:
        raise RequestError("missing 'protocol' field")
    if protocol != PROTOCOL:
        raise ProtocolMismatch(f"protocol {protocol!r} not supported, expected {PROTOCOL!r}")

    for key in ("model_kind", "prompt", "t", "shape", "frames", "seed"):
        _require(key in payload, f"missing '{key}' field")

    kind = payload["model_kind"]
    _require(kind in MODEL_KINDS, f"model_kind must be one of {MODEL_KINDS}, got {kind!r}")
    _require(isinstance(payload["prompt"], str), "'prompt' must be a string")

    t = payload["t"]
    _require(isinstance(t, int) and not isinstance(t, bool), "'t' must be an integer")
    _require(0 <= t < SCHEDULE_STEPS, f"'t' must lie in [0, {SCHEDULE_STEPS})")

    seed = payload["seed"]
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0,
             "'seed' must be a non-negative integer")

    shape = payload["shape"]
    _require(isinstance(shape, list) and len(shape) == 4
             and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in shape),
             "'shape' must be a list of four positive integers")
    shape = tuple(int(v) for v in shape)
    _require(int(np.prod(shape, dtype=np.int64)) <= _MAX_PAYLOAD_ELEMENTS,
             "'shape' is unreasonably large")
    _require(shape[-1] == 3, "'shape' must end in 3 channels")

    if kind == "video":
        _require(shape[0] == VIDEO_FRAMES, f"video requests carry {VIDEO_FRAMES} frames")
        fps = payload.get("fps")
        _require(isinstance(fps, (int, float)) and not isinstance(fps, bool) and fps > 0,
                 "video requests need a positive 'fps'")
    else:
        _require("fps" not in payload, f"{kind} requests do not carry 'fps'")
        if kind == "multiview":
            _require(shape[0] == MULTIVIEW_FRAMES,
                     f"multiview requests carry {MULTIVIEW_FRAMES} frames")

    for key in ("negative_prompt", "augmented_prompt"):
        if key in payload:
            _require(isinstance(payload[key], str), f"'{key}' must be a string")

    _require(isinstance(payload["frames"], str), "'frames' must be a base64 string")
    frames = decode_f32(payload["frames"], shape)
    _require(bool(np.isfinite(frames).all()), "'frames' must be finite")

    return {
        "model_kind": kind,
        "prompt": payload["prompt"],
        "t": t,
        "seed": seed,
        "shape": shape,
        "frames": frames,
        "negative_prompt": payload.get("negative_prompt"),
        "augmented_prompt": payload.get("augmented_prompt"),
    }


class AnalyticScorer:
    """Closed-form scores against a fixed broadcastable target."""

    def __init__(self, target: np.ndarray, seed: int):
        self.target = np.asarray(target, dtype=np.float32)
        self.seed = int(seed)
        self.alpha, self.sigma = schedule_tables()

    def score(self, request: dict) -> dict:
        shape = request["shape"]
        try:
            full = np.broadcast_to(self.target, shape)
        except ValueError:
            raise RequestError(
                f"target of shape {self.target.shape} does not broadcast to {shape}"
            ) from None
        target = np.ascontiguousarray(full, dtype=np.float32)
        frames = np.asarray(request["frames"], dtype=np.float32)

        rng = np.random.default_rng(np.random.SeedSequence([self.seed, request["seed"]]))
        noise = rng.standard_normal(shape, dtype=np.float32)
        a = np.float32(self.alpha[request["t"]])
        s = np.float32(self.sigma[request["t"]])
        z = a * frames + s * noise
        eps_cond = (z - a * target) / s

        out = {
            "protocol": PROTOCOL,
            "shape": list(shape),
            "eps_cond": encode_f32(eps_cond),
            "eps_uncond": encode_f32(noise),
            "eps_used": encode_f32(noise),
        }
        if request["negative_prompt"] is not None:
            out["eps_neg"] = encode_f32(noise)
        if request["augmented_prompt"] is not None:
            out["eps_aug"] = encode_f32(eps_cond)
        return out


class ZerosScorer:
    """Zero scores of the requested shape; shape-true but motionless."""

    def score(self, request: dict) -> dict:
        zeros = encode_f32(np.zeros(request["shape"], dtype=np.float32))
        out = {
            "protocol": PROTOCOL,
            "shape": list(request["shape"]),
            "eps_cond": zeros,
            "eps_uncond": zeros,
            "eps_used": zeros,
        }
        if request["negative_prompt"] is not None:
            out["eps_neg"] = zeros
        if request["augmented_prompt"] is not None:
            out["eps_aug"] = zeros
        return out
