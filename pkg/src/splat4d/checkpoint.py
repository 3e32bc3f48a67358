"""Binary persistence for clouds, deformation fields and sequence maps.

Container layout, all little-endian:

    "AYG4" | version u32 | N u32 | positions | log_scales |
    opacities_raw | sh                               (float32 tensors)

followed by zero or more tagged sections until end of file:

    "DEFM"  one deformation field: hidden u32, layers u32,
            frequencies u32, gate_mode u8, gate_exponent f64,
            clamp_half f64, per-layer weight+bias, layer-norm
            gain+offset in ascending layer order, output weight+bias
            (float32 tensors)
    "SEQM"  sequence map: n_segments u32, loop u8, per segment
            (tau_start f64, tau_end f64), per interior boundary
            (overlap_lo f64, overlap_hi f64)

Weights are stored float32, scalar knobs float64, so a load followed
by a save reproduces the file byte for byte and loaded state renders
bit-identically. Any structural problem raises FormatError with no
partial state returned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import deform
from . import scene as sc

MAGIC = b"AYG4"
VERSION = 1
TAG_FIELD = b"DEFM"
TAG_SEQUENCE = b"SEQM"

_GATE_CODES = {deform.GATE_START: 0, deform.GATE_BOTH: 1}
_GATE_NAMES = {v: k for k, v in _GATE_CODES.items()}


class FormatError(RuntimeError):
    """File does not follow the container contract."""


class UnsupportedVersionError(FormatError):
    """Recognized container, unknown version."""


@dataclass
class SequenceMeta:
    """Tau intervals per segment plus the overlap windows between them."""

    intervals: List[Tuple[float, float]]
    overlaps: List[Tuple[float, float]] = field(default_factory=list)
    loop: bool = False

    def validate(self) -> "SequenceMeta":
        if not self.intervals:
            raise ValueError("sequence needs at least one segment")
        if len(self.overlaps) != len(self.intervals) - 1:
            raise ValueError("need one overlap window per interior boundary")
        return self


@dataclass
class CheckpointBundle:
    cloud: sc.GaussianCloud
    fields: List[deform.DeformationField]
    meta: Optional[SequenceMeta] = None


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pack_cloud(cloud: sc.GaussianCloud) -> bytes:
    parts = [struct.pack("<I", cloud.n)]
    parts.append(_f32_bytes(cloud.positions))
    parts.append(_f32_bytes(cloud.log_scales))
    parts.append(_f32_bytes(cloud.opacities_raw))
    parts.append(_f32_bytes(cloud.sh))
    return b"".join(parts)


def _pack_field(f: deform.DeformationField) -> bytes:
    if f.gate_mode not in _GATE_CODES:
        raise ValueError(f"unknown gate mode {f.gate_mode!r}")
    parts = [TAG_FIELD,
             struct.pack("<IIIBdd", f.hidden, f.layers, f.frequencies,
                         _GATE_CODES[f.gate_mode], f.gate_exponent,
                         f.clamp_half)]
    for i in range(f.layers):
        parts.append(_f32_bytes(f.weights[i]))
        parts.append(_f32_bytes(f.biases[i]))
    for i in sorted(f.ln_gain):
        parts.append(_f32_bytes(f.ln_gain[i]))
        parts.append(_f32_bytes(f.ln_offset[i]))
    parts.append(_f32_bytes(f.out_weight))
    parts.append(_f32_bytes(f.out_bias))
    return b"".join(parts)


def _pack_meta(meta: SequenceMeta) -> bytes:
    meta.validate()
    parts = [TAG_SEQUENCE,
             struct.pack("<IB", len(meta.intervals), int(meta.loop))]
    for lo, hi in meta.intervals:
        parts.append(struct.pack("<dd", lo, hi))
    for lo, hi in meta.overlaps:
        parts.append(struct.pack("<dd", lo, hi))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if self.remaining < n:
            raise FormatError(f"file truncated: wanted {n} bytes at offset "
                              f"{self.pos}, {self.remaining} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape) \
            .astype(np.float32)


def _read_cloud(r: _Reader) -> sc.GaussianCloud:
    (n,) = r.unpack("<I")
    return sc.GaussianCloud(r.tensor((n, 3)), r.tensor((n,)),
                            r.tensor((n,)), r.tensor((n, 3, sc.SH_COEFFS)))


def _read_field(r: _Reader) -> deform.DeformationField:
    hidden, layers, freqs, gate_code, gate_exp, clamp_half = \
        r.unpack("<IIIBdd")
    if gate_code not in _GATE_NAMES:
        raise FormatError(f"unknown gate mode code {gate_code}")
    if hidden < 1 or layers < 1 or freqs < 1:
        raise FormatError("degenerate field header")
    in_dim = 8 * freqs
    weights, biases = [], []
    for i in range(layers):
        fan_in = in_dim if i == 0 else hidden
        weights.append(r.tensor((hidden, fan_in)))
        biases.append(r.tensor((hidden,)))
    ln_gain, ln_offset = {}, {}
    for i in deform.ln_layer_indices(layers):
        ln_gain[i] = r.tensor((hidden,))
        ln_offset[i] = r.tensor((hidden,))
    out_weight = r.tensor((3, hidden))
    out_bias = r.tensor((3,))
    return deform.DeformationField(weights, biases, ln_gain, ln_offset,
                                   out_weight, out_bias, hidden, layers,
                                   freqs, gate_exp, clamp_half,
                                   _GATE_NAMES[gate_code])


def _read_meta(r: _Reader) -> SequenceMeta:
    n_seg, loop = r.unpack("<IB")
    if n_seg < 1:
        raise FormatError("sequence section with zero segments")
    intervals = [tuple(r.unpack("<dd")) for _ in range(n_seg)]
    overlaps = [tuple(r.unpack("<dd")) for _ in range(n_seg - 1)]
    return SequenceMeta(intervals, overlaps, bool(loop))


def save_checkpoint(path, cloud: sc.GaussianCloud,
                    fields: Sequence[deform.DeformationField] = (),
                    meta: Optional[SequenceMeta] = None):
    blob = [MAGIC, struct.pack("<I", VERSION), _pack_cloud(cloud)]
    for f in fields:
        blob.append(_pack_field(f))
    if meta is not None:
        blob.append(_pack_meta(meta))
    data = b"".join(blob)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} not supported (expected "
            f"{VERSION})")
    cloud = _read_cloud(r)
    fields: List[deform.DeformationField] = []
    meta: Optional[SequenceMeta] = None
    while r.remaining:
        tag = r.take(4)
        if tag == TAG_FIELD:
            if meta is not None:
                raise FormatError("field section after sequence section")
            fields.append(_read_field(r))
        elif tag == TAG_SEQUENCE:
            if meta is not None:
                raise FormatError("duplicate sequence section")
            meta = _read_meta(r)
        else:
            raise FormatError(f"unknown section tag {tag!r}")
    return CheckpointBundle(cloud, fields, meta)
