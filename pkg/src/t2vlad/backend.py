"""Kernel backend selection.

Two interchangeable kernel modules exist: a numba-jitted one and a pure
numpy one. The active module is picked once at import time from the
T2VLAD_BACKEND environment variable ("numba" or "numpy"); unset means numba
when it imports cleanly, numpy otherwise. Call sites must go through
``kernels()`` (or attribute access on this module each call) so that
``set_backend`` swaps take effect everywhere.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_VALID = ("numba", "numpy")

_active = None
_active_name = ""


def _load(name):
    if name == "numpy":
        return _kernels_numpy
    from . import _kernels_numba

    return _kernels_numba


def set_backend(name):
    """Force the kernel backend. Returns the module that is now active."""
    global _active, _active_name
    if name not in _VALID:
        raise ConfigError(
            "unknown backend %r (expected one of %s)" % (name, ", ".join(_VALID))
        )
    _active = _load(name)
    _active_name = name
    return _active


def active_backend():
    """Name of the backend in use, resolving the default on first call."""
    if _active is None:
        _init_from_env()
    return _active_name


def kernels():
    """The active kernel module."""
    if _active is None:
        _init_from_env()
    return _active


def _init_from_env():
    global _active, _active_name
    raw = os.environ.get("T2VLAD_BACKEND", "").strip().lower()
    if raw:
        if raw not in _VALID:
            raise ConfigError(
                "T2VLAD_BACKEND=%r is not valid (expected one of %s)"
                % (raw, ", ".join(_VALID))
            )
        set_backend(raw)
        return
    try:
        set_backend("numba")
    except ImportError:
        set_backend("numpy")
