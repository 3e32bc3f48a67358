"""Adaptive moment estimation with per-tensor state and row surgery.

The optimizer never owns parameter arrays; callers register a named
tensor once and then feed (param, grad) pairs. Densification reshapes
clouds mid-run, so moment rows can be remapped through the provenance
map the controller reports: surviving rows keep their history, fresh
rows start cold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Union

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS_POSITIONS = 1e-15
EPS_DEFAULT = 1e-8

LrLike = Union[float, Callable[[int], float]]


def exp_decay(lr_start: float, lr_end: float, decay_steps: int) -> Callable:
    """Geometric interpolation reaching lr_end at decay_steps, then flat."""
    if lr_start <= 0.0 or lr_end <= 0.0:
        raise ValueError("rates must be positive")
    ratio = lr_end / lr_start

    def lr(step: int) -> float:
        return lr_start * ratio ** min(step / decay_steps, 1.0)

    return lr


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    def __init__(self, beta1: float = BETA1, beta2: float = BETA2):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self._state: Dict[str, AdamState] = {}
        self._lr: Dict[str, LrLike] = {}
        self._eps: Dict[str, float] = {}

    def register(self, name: str, template: np.ndarray, lr: LrLike,
                 eps: float = EPS_DEFAULT):
        if name in self._state:
            raise ValueError(f"tensor {name!r} already registered")
        shape = np.asarray(template).shape
        self._state[name] = AdamState(np.zeros(shape), np.zeros(shape))
        self._lr[name] = lr
        self._eps[name] = float(eps)

    def registered(self, name: str) -> bool:
        return name in self._state

    def state_of(self, name: str) -> AdamState:
        return self._state[name]

    def learning_rate(self, name: str, step: int) -> float:
        lr = self._lr[name]
        return float(lr(step)) if callable(lr) else float(lr)

    def update(self, name: str, param: np.ndarray, grad: np.ndarray):
        """One in-place step on param; dtype of param is preserved."""
        state = self._state[name]
        if param.shape != state.m.shape or grad.shape != state.m.shape:
            raise ValueError(f"{name}: shape drifted from registered state; "
                             "remap after resizing")
        g = np.asarray(grad, dtype=np.float64)
        lr = self.learning_rate(name, state.step)
        state.step += 1
        state.m *= self.beta1
        state.m += (1.0 - self.beta1) * g
        state.v *= self.beta2
        state.v += (1.0 - self.beta2) * g * g
        m_hat = state.m / (1.0 - self.beta1 ** state.step)
        v_hat = state.v / (1.0 - self.beta2 ** state.step)
        delta = lr * m_hat / (np.sqrt(v_hat) + self._eps[name])
        param -= delta.astype(param.dtype, copy=False) \
            if param.dtype != np.float64 else delta

    def remap(self, name: str, source: np.ndarray):
        """Rebuild moment rows after a resize along axis 0.

        source[i] >= 0 copies that old row's history; -1 starts cold.
        The per-tensor step counter is kept.
        """
        state = self._state[name]
        source = np.asarray(source, dtype=np.int64)
        fresh = source < 0
        old = np.where(fresh, 0, source)
        m = state.m[old].copy()
        v = state.v[old].copy()
        m[fresh] = 0.0
        v[fresh] = 0.0
        self._state[name] = AdamState(m, v, state.step)
