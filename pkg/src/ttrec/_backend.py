"""Kernel backend selection.

Hot loops come in two flavours: numba ``@njit`` kernels and pure-numpy
equivalents. ``TTREC_BACKEND=numpy`` forces the numpy path; the default is
numba when it imports cleanly.
"""
from __future__ import annotations

import contextlib
import logging
import os

log = logging.getLogger(__name__)

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator


BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get("TTREC_BACKEND", "").strip().lower()
    if requested and requested not in BACKENDS:
        raise ValueError(f"TTREC_BACKEND must be one of {BACKENDS}, got {requested!r}")
    if requested == "numba" and not NUMBA_AVAILABLE:
        log.warning("TTREC_BACKEND=numba requested but numba is unavailable; using numpy")
        return "numpy"
    if requested:
        return requested
    return "numba" if NUMBA_AVAILABLE else "numpy"


_current = _initial_backend()


def get_backend() -> str:
    return _current


def use_numba() -> bool:
    return _current == "numba"


def set_backend(name: str) -> None:
    global _current
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not importable in this environment")
    _current = name


@contextlib.contextmanager
def backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = _current
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
