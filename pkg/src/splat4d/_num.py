"""Small numeric helpers shared across modules."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("logit argument must lie strictly inside (0, 1)")
    return float(np.log(p / (1.0 - p)))


def derive_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed, stable across runs and platforms."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
