"""Time-conditioned deformation field over Gaussian positions.

An MLP maps the positional encoding of (x, y, z, tau) to a displacement
that is soft-clamped to half a unit per component and scaled by a
temporal gate vanishing at tau = 0, so the field can never move the
frame at time zero. Forward and reverse passes are hand-rolled numpy;
gradients flow to every weight and to the input positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Tuple

import numpy as np

NUM_FREQUENCIES = 4
GATE_EXPONENT = 0.35
CLAMP_HALF_RANGE = 0.5
LN_EPS = 1e-5

GATE_START = "start"
GATE_BOTH = "both"


@dataclass
class DeformationField:
    """MLP weights plus the fixed architecture knobs.

    Layer normalization sits before the activation on every second
    hidden layer (the 2nd, 4th, ...). gate_mode 'both' additionally
    pins the displacement to zero at tau = 1 for looping sequences.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    ln_gain: Dict[int, np.ndarray]
    ln_offset: Dict[int, np.ndarray]
    out_weight: np.ndarray
    out_bias: np.ndarray
    hidden: int
    layers: int
    frequencies: int = NUM_FREQUENCIES
    gate_exponent: float = GATE_EXPONENT
    clamp_half: float = CLAMP_HALF_RANGE
    gate_mode: str = GATE_START

    @property
    def input_dim(self) -> int:
        return 8 * self.frequencies

    def param_items(self):
        """Deterministic (name, array) iteration over every parameter."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b
        for i in sorted(self.ln_gain):
            yield f"ln_g{i}", self.ln_gain[i]
            yield f"ln_b{i}", self.ln_offset[i]
        yield "out_w", self.out_weight
        yield "out_b", self.out_bias

    def astype(self, dtype) -> "DeformationField":
        return DeformationField(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            {i: g.astype(dtype) for i, g in self.ln_gain.items()},
            {i: o.astype(dtype) for i, o in self.ln_offset.items()},
            self.out_weight.astype(dtype), self.out_bias.astype(dtype),
            self.hidden, self.layers, self.frequencies, self.gate_exponent,
            self.clamp_half, self.gate_mode)

    def copy(self) -> "DeformationField":
        return self.astype(self.weights[0].dtype)


@dataclass
class WeightGrads:
    d_weights: List[np.ndarray]
    d_biases: List[np.ndarray]
    d_ln_gain: Dict[int, np.ndarray]
    d_ln_offset: Dict[int, np.ndarray]
    d_out_weight: np.ndarray
    d_out_bias: np.ndarray

    @classmethod
    def zeros_like(cls, f: DeformationField) -> "WeightGrads":
        return cls([np.zeros(w.shape) for w in f.weights],
                   [np.zeros(b.shape) for b in f.biases],
                   {i: np.zeros(g.shape) for i, g in f.ln_gain.items()},
                   {i: np.zeros(o.shape) for i, o in f.ln_offset.items()},
                   np.zeros(f.out_weight.shape), np.zeros(f.out_bias.shape))

    def param_items(self):
        for i, (w, b) in enumerate(zip(self.d_weights, self.d_biases)):
            yield f"w{i}", w
            yield f"b{i}", b
        for i in sorted(self.d_ln_gain):
            yield f"ln_g{i}", self.d_ln_gain[i]
            yield f"ln_b{i}", self.d_ln_offset[i]
        yield "out_w", self.d_out_weight
        yield "out_b", self.d_out_bias

    def __iadd__(self, other: "WeightGrads") -> "WeightGrads":
        for i in range(len(self.d_weights)):
            self.d_weights[i] += other.d_weights[i]
            self.d_biases[i] += other.d_biases[i]
        for i in self.d_ln_gain:
            self.d_ln_gain[i] += other.d_ln_gain[i]
            self.d_ln_offset[i] += other.d_ln_offset[i]
        self.d_out_weight += other.d_out_weight
        self.d_out_bias += other.d_out_bias
        return self


def ln_layer_indices(layers: int) -> Tuple[int, ...]:
    """Zero-based hidden layers carrying layer norm: every second one."""
    return tuple(i for i in range(layers) if (i + 1) % 2 == 0)


def init_field(hidden: int = 128, layers: int = 5, seed: int = 0,
               frequencies: int = NUM_FREQUENCIES,
               gate_mode: str = GATE_START) -> DeformationField:
    """Seeded init; the final linear layer starts at zero so the field
    is the identity deformation until optimization moves it."""
    if layers < 2:
        raise ValueError("need at least two hidden layers")
    if gate_mode not in (GATE_START, GATE_BOTH):
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    rng = np.random.default_rng(seed)
    in_dim = 8 * frequencies
    dims = [in_dim] + [hidden] * layers
    weights, biases = [], []
    for i in range(layers):
        fan_in = dims[i]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[i + 1], fan_in))
        weights.append(w.astype(np.float32))
        biases.append(np.zeros(dims[i + 1], dtype=np.float32))
    ln_gain = {i: np.ones(hidden, dtype=np.float32)
               for i in ln_layer_indices(layers)}
    ln_offset = {i: np.zeros(hidden, dtype=np.float32)
                 for i in ln_layer_indices(layers)}
    return DeformationField(
        weights=weights, biases=biases, ln_gain=ln_gain, ln_offset=ln_offset,
        out_weight=np.zeros((3, hidden), dtype=np.float32),
        out_bias=np.zeros(3, dtype=np.float32),
        hidden=hidden, layers=layers, frequencies=frequencies,
        gate_mode=gate_mode)


def positional_encode(positions: np.ndarray, tau: float,
                      frequencies: int = NUM_FREQUENCIES) -> np.ndarray:
    """Sinusoidal features of (x, y, z, tau), frequencies 2^m pi.

    Layout per input u: [sin(pi u), cos(pi u), sin(2 pi u), cos(2 pi u),
    ...], inputs concatenated in x, y, z, tau order. Identical for
    inputs two units apart at every frequency.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    u = np.concatenate([pos, np.full((n, 1), float(tau))], axis=1)
    m = (2.0 ** np.arange(frequencies)) * np.pi
    phase = u[:, :, None] * m[None, None, :]
    out = np.empty((n, 4, frequencies, 2))
    out[..., 0] = np.sin(phase)
    out[..., 1] = np.cos(phase)
    return out.reshape(n, 8 * frequencies)


def temporal_gate(field: DeformationField, tau: float) -> float:
    """Gate in [0, 1]; exactly 0 at tau = 0 (and at tau = 1 for looping
    fields), exactly 1 at the gate peak."""
    e = field.gate_exponent
    if field.gate_mode == GATE_BOTH:
        return float((tau * (1.0 - tau)) ** e / 0.25 ** e)
    return float(tau ** e)


@dataclass
class FieldTape:
    """Forward intermediates reused by the reverse pass."""

    enc: np.ndarray
    pre: List[np.ndarray]
    post_ln: List[np.ndarray]
    acts: List[np.ndarray]
    ln_stats: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]
    out_pre: np.ndarray
    tanh_val: np.ndarray
    gate: float
    tau: float


def field_forward(field: DeformationField, positions: np.ndarray, tau: float):
    """Displacements (N, 3) and the tape for the reverse pass."""
    enc = positional_encode(positions, tau, field.frequencies)
    h = enc
    pre, post_ln, acts = [], [], []
    ln_stats = {}
    for i in range(field.layers):
        z = h @ np.asarray(field.weights[i], np.float64).T \
            + np.asarray(field.biases[i], np.float64)
        pre.append(z)
        if i in field.ln_gain:
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (z - mu) * inv_std
            y = xhat * np.asarray(field.ln_gain[i], np.float64) \
                + np.asarray(field.ln_offset[i], np.float64)
            ln_stats[i] = (xhat, inv_std, mu)
        else:
            y = z
        post_ln.append(y)
        h = np.maximum(y, 0.0)
        acts.append(h)
    out_pre = h @ np.asarray(field.out_weight, np.float64).T \
        + np.asarray(field.out_bias, np.float64)
    tanh_val = np.tanh(out_pre / field.clamp_half)
    gate = temporal_gate(field, tau)
    disp = gate * field.clamp_half * tanh_val
    tape = FieldTape(enc, pre, post_ln, acts, ln_stats, out_pre, tanh_val,
                     gate, float(tau))
    return disp, tape


def field_backward(field: DeformationField, positions: np.ndarray, tau: float,
                   d_displacements: np.ndarray,
                   tape: Optional[FieldTape] = None):
    """Reverse pass for sum(d_displacements * displacements).

    Returns (WeightGrads, d_positions). Recomputes the forward tape when
    one is not supplied.
    """
    if tape is None:
        _, tape = field_forward(field, positions, tau)
    grads = WeightGrads.zeros_like(field)

    d_out_pre = np.asarray(d_displacements, np.float64) * tape.gate \
        * (1.0 - tape.tanh_val ** 2)
    grads.d_out_weight += d_out_pre.T @ tape.acts[-1]
    grads.d_out_bias += d_out_pre.sum(axis=0)
    d_h = d_out_pre @ np.asarray(field.out_weight, np.float64)

    for i in range(field.layers - 1, -1, -1):
        d_y = d_h * (tape.post_ln[i] > 0.0)
        if i in field.ln_gain:
            xhat, inv_std, _ = tape.ln_stats[i]
            gain = np.asarray(field.ln_gain[i], np.float64)
            grads.d_ln_gain[i] += (d_y * xhat).sum(axis=0)
            grads.d_ln_offset[i] += d_y.sum(axis=0)
            d_xhat = d_y * gain
            m1 = d_xhat.mean(axis=1, keepdims=True)
            m2 = (d_xhat * xhat).mean(axis=1, keepdims=True)
            d_z = (d_xhat - m1 - xhat * m2) * inv_std
        else:
            d_z = d_y
        h_prev = tape.acts[i - 1] if i > 0 else tape.enc
        grads.d_weights[i] += d_z.T @ h_prev
        grads.d_biases[i] += d_z.sum(axis=0)
        d_h = d_z @ np.asarray(field.weights[i], np.float64)

    # chain through the encoding back to xyz (tau is not a parameter)
    n = tape.enc.shape[0]
    m = (2.0 ** np.arange(field.frequencies)) * np.pi
    d_enc = d_h.reshape(n, 4, field.frequencies, 2)
    pos = np.asarray(positions, dtype=np.float64)
    u = np.concatenate([pos, np.full((n, 1), float(tau))], axis=1)
    phase = u[:, :, None] * m[None, None, :]
    d_u = (d_enc[..., 0] * np.cos(phase) - d_enc[..., 1] * np.sin(phase)) \
        * m[None, None, :]
    d_positions = d_u.sum(axis=2)[:, :3]
    return grads, d_positions


def build_nn_index(positions: np.ndarray, k: int = 40) -> np.ndarray:
    """Indices (N, k_eff) of nearest neighbors, self excluded.

    k_eff = min(k, N - 1); needs at least two points.
    """
    from scipy.spatial import cKDTree

    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        raise ValueError("neighbor index needs at least two points")
    k_eff = min(k, n - 1)
    tree = cKDTree(pos)
    _, idx = tree.query(pos, k=k_eff + 1)
    idx = np.atleast_2d(idx)
    # first column is the point itself except under exact ties; scrub any
    # residual self references
    out = np.empty((n, k_eff), dtype=np.int64)
    for row in range(n):
        cols = [c for c in idx[row] if c != row][:k_eff]
        out[row] = cols
    return out
