"""Kernel backend selection.

Hot loops (bilinear gather/scatter, the SSM recurrence, the FFT and the
assignment solver) exist twice: a numba ``@njit`` version in ``_jit`` and a
vectorised numpy version in ``_ref``.  ``DYSS_BACKEND`` picks one at import
time (``numba`` or ``numpy``); without the variable numba is used when it
imports cleanly.
"""
from __future__ import annotations

import contextlib
import importlib
import os
import threading

ENV_VAR = "DYSS_BACKEND"
BACKENDS = ("numba", "numpy")

_lock = threading.Lock()


def numba_available() -> bool:
    try:
        importlib.import_module("numba")
    except ImportError:
        return False
    return True


def _initial_backend() -> str:
    name = os.environ.get(ENV_VAR, "").strip().lower()
    if not name:
        return "numba" if numba_available() else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"{ENV_VAR}={name!r}; expected one of {BACKENDS}")
    if name == "numba" and not numba_available():
        raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
    return name


_current = _initial_backend()


def get_backend() -> str:
    return _current


def set_backend(name: str) -> None:
    global _current
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not numba_available():
        raise ImportError("numba is not importable")
    with _lock:
        _current = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def impl(name: str, backend: str | None = None):
    """Return kernel ``name`` from the active (or requested) backend module."""
    backend = backend or _current
    module = importlib.import_module("dyss.kernels._jit" if backend == "numba" else "dyss.kernels._ref")
    return getattr(module, name)
