"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy kernels
are the fallback. SPLAT4D_BACKEND=python|cython forces a choice.
"""

from __future__ import annotations

import os

from . import _kernels_py

_COMPILED = None
_COMPILED_ERR = None
try:
    from . import _kernels as _compiled_mod

    _COMPILED = _compiled_mod
except ImportError as exc:  # pragma: no cover - depends on build env
    _COMPILED_ERR = exc


def available_backends():
    names = ["python"]
    if _COMPILED is not None:
        names.insert(0, "cython")
    return names


def get_kernels(name=None):
    choice = name or os.environ.get("SPLAT4D_BACKEND", "auto")
    if choice in (None, "auto"):
        return _COMPILED if _COMPILED is not None else _kernels_py
    if choice == "cython":
        if _COMPILED is None:
            raise RuntimeError(
                f"compiled kernels unavailable: {_COMPILED_ERR}")
        return _COMPILED
    if choice == "python":
        return _kernels_py
    raise ValueError(f"unknown backend {choice!r}")


def active_backend(name=None) -> str:
    return get_kernels(name).BACKEND_NAME
