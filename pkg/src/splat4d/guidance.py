"""Score providers: the contract, offline oracles and the remote client.

A provider is anything with ``score(request) -> ScoreBatch`` that is
deterministic given (request, provider seed) and returns tensors with
the request's frame shape. The engine never diffuses frames itself; the
provider owns the forward-diffusion noise for its own scoring and hands
the drawn noise back as ``eps_used``.

Wire protocol (version "ayg-score/1"): POST <endpoint>/v1/score with a
JSON body {protocol, model_kind, prompt, negative_prompt?,
augmented_prompt?, t, fps?, shape: [F,H,W,C], frames, seed} where
tensors are base64 little-endian float32. The response carries {shape,
eps_cond, eps_uncond, eps_neg?, eps_aug?, eps_used?} in the same
encoding. GET <endpoint>/healthz reports {"status", "protocol"}.
Remote servers reimplementing the analytic oracle must reproduce its
float32 arithmetic exactly; the equivalence suite compares bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .distill import NoiseSchedule, ScoreBatch

PROTOCOL = "ayg-score/1"
VIDEO_FRAMES = 16
MULTIVIEW_FRAMES = 4
MODEL_KINDS = ("video", "image", "multiview")


class TransportError(RuntimeError):
    """Remote endpoint unreachable after the retry budget."""


class ProtocolError(RuntimeError):
    """Response violates the wire contract; no partial batch is kept."""


@dataclass
class ScoreRequest:
    """One scoring call: frames in model range plus conditioning."""

    frames: np.ndarray
    prompt: str
    t: int
    model_kind: str
    seed: int = 0
    negative_prompt: Optional[str] = None
    augmented_prompt: Optional[str] = None
    fps: Optional[int] = None

    def validate(self) -> "ScoreRequest":
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise ValueError("frames must be (F, H, W, C)")
        if self.model_kind == "video":
            if frames.shape[0] != VIDEO_FRAMES:
                raise ValueError(f"video requests carry {VIDEO_FRAMES} "
                                 f"frames, got {frames.shape[0]}")
            if self.fps is None:
                raise ValueError("video requests need fps")
        else:
            if self.fps is not None:
                raise ValueError("fps is a video-only field")
            if self.model_kind == "multiview" \
                    and frames.shape[0] != MULTIVIEW_FRAMES:
                raise ValueError(f"multiview groups are {MULTIVIEW_FRAMES} "
                                 f"views, got {frames.shape[0]}")
        if self.t < 0:
            raise ValueError("diffusion step must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        return self


class ScoreProvider(Protocol):
    def score(self, request: ScoreRequest) -> ScoreBatch: ...


class AnalyticTargetProvider:
    """Closed-form denoiser for a point-mass data distribution.

    With z = a*x + s*eps the conditional residual (z - a*target)/s is
    the optimal denoiser output, and because eps_uncond is the very
    same draw, the classifier difference collapses to a/s * (x -
    target): a deterministic pull of the rendering toward the target.
    Negative and augmented scores, when requested, are neutral copies
    so every guidance weight remains usable. All tensor math is float32
    so remote reimplementations can match byte for byte.
    """

    def __init__(self, target: np.ndarray, seed: int = 0,
                 schedule: Optional[NoiseSchedule] = None):
        self.target = np.ascontiguousarray(target, dtype=np.float32)
        if self.target.ndim != 4:
            raise ValueError("target must be (F, H, W, C)")
        self.seed = int(seed)
        self.schedule = schedule or NoiseSchedule.scaled_linear()

    def score(self, request: ScoreRequest) -> ScoreBatch:
        request.validate()
        frames = np.asarray(request.frames, dtype=np.float32)
        if frames.shape != self.target.shape:
            raise ValueError(f"request shape {frames.shape} does not match "
                             f"target {self.target.shape}")
        if not request.t < self.schedule.steps:
            raise ValueError(f"step {request.t} outside schedule")
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, request.seed]))
        noise = rng.standard_normal(self.target.shape, dtype=np.float32)
        a = np.float32(self.schedule.alpha[request.t])
        s = np.float32(self.schedule.sigma[request.t])
        z = a * frames + s * noise
        eps_cond = (z - a * self.target) / s
        batch = ScoreBatch(
            eps_cond=eps_cond, eps_uncond=noise, eps_used=noise,
            eps_neg=noise.copy() if request.negative_prompt is not None
            else None,
            eps_aug=eps_cond.copy() if request.augmented_prompt is not None
            else None)
        return batch.validate()


class ZerosProvider:
    """All-zero scores; the assembled gradient is exactly zero."""

    def score(self, request: ScoreRequest) -> ScoreBatch:
        request.validate()
        shape = np.asarray(request.frames).shape

        def z():
            return np.zeros(shape, dtype=np.float32)

        return ScoreBatch(
            eps_cond=z(), eps_uncond=z(), eps_used=z(),
            eps_neg=z() if request.negative_prompt is not None else None,
            eps_aug=z() if request.augmented_prompt is not None else None)


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(data: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, TypeError) as exc:
        raise ProtocolError(f"bad base64 tensor payload: {exc}") from exc
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise ProtocolError(f"tensor payload holds {len(raw)} bytes, "
                            f"shape {tuple(shape)} needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(tuple(shape)) \
        .astype(np.float32, copy=False)


def request_payload(request: ScoreRequest) -> dict:
    """Wire-format dict for a validated request."""
    frames = np.asarray(request.frames)
    body = {
        "protocol": PROTOCOL,
        "model_kind": request.model_kind,
        "prompt": request.prompt,
        "t": int(request.t),
        "shape": [int(d) for d in frames.shape],
        "frames": encode_f32(frames),
        "seed": int(request.seed),
    }
    if request.negative_prompt is not None:
        body["negative_prompt"] = request.negative_prompt
    if request.augmented_prompt is not None:
        body["augmented_prompt"] = request.augmented_prompt
    if request.fps is not None:
        body["fps"] = int(request.fps)
    return body


def batch_from_payload(payload: dict, expect_shape=None) -> ScoreBatch:
    """Decode a response dict, rejecting anything off-contract."""
    if not isinstance(payload, dict):
        raise ProtocolError("response body is not a JSON object")
    shape = payload.get("shape")
    if (not isinstance(shape, (list, tuple)) or len(shape) != 4
            or not all(isinstance(d, int) and d > 0 for d in shape)):
        raise ProtocolError(f"bad response shape field: {shape!r}")
    if expect_shape is not None and tuple(shape) != tuple(expect_shape):
        raise ProtocolError(f"response shape {tuple(shape)} does not match "
                            f"request shape {tuple(expect_shape)}")
    tensors = {}
    for key in ("eps_cond", "eps_uncond"):
        if key not in payload:
            raise ProtocolError(f"response missing required tensor {key}")
    for key in ("eps_cond", "eps_uncond", "eps_neg", "eps_aug", "eps_used"):
        if key in payload and payload[key] is not None:
            if not isinstance(payload[key], str):
                raise ProtocolError(f"tensor field {key} must be base64 text")
            tensors[key] = decode_f32(payload[key], shape)
    try:
        return ScoreBatch(**tensors).validate()
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc


class RemoteProvider:
    """Client for the /v1/score wire protocol.

    Transport-level failures are retried with exponential backoff up to
    `retries` extra attempts; HTTP error statuses and malformed bodies
    raise ProtocolError immediately. A bounded semaphore caps in-flight
    requests so concurrent callers cannot stampede the endpoint.
    """

    def __init__(self, endpoint: str, retries: int = 3, timeout: float = 30.0,
                 backoff: float = 0.2, max_inflight: int = 4):
        self.endpoint = endpoint.rstrip("/")
        self.retries = int(retries)
        self.timeout = float(timeout)
        self.backoff = float(backoff)
        self._gate = threading.BoundedSemaphore(int(max_inflight))

    def _post(self, url: str, body: bytes) -> bytes:
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"})
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2.0 ** (attempt - 1))
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as rsp:
                    return rsp.read()
            except urllib.error.HTTPError as exc:
                detail = ""
                try:
                    detail = exc.read().decode("utf-8", "replace")[:200]
                except OSError:
                    pass
                raise ProtocolError(
                    f"endpoint returned HTTP {exc.code}: {detail}") from exc
            except (urllib.error.URLError, OSError) as exc:
                last_exc = exc
        raise TransportError(f"{url} unreachable after "
                             f"{self.retries + 1} attempts: {last_exc}")

    def score(self, request: ScoreRequest) -> ScoreBatch:
        request.validate()
        body = json.dumps(request_payload(request)).encode("utf-8")
        with self._gate:
            raw = self._post(self.endpoint + "/v1/score", body)
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"response is not valid JSON: {exc}") from exc
        return batch_from_payload(payload,
                                  np.asarray(request.frames).shape)

    def health(self) -> dict:
        req = urllib.request.Request(self.endpoint + "/healthz")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as rsp:
                return json.loads(rsp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"health check failed: {exc}") from exc
