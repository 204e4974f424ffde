"""Selects the convolution kernel implementation at import time.

The compiled Cython module is used when it was built; otherwise the numpy
fallback. Set ``ISPFORGE_BACKEND=python`` to force the fallback.
"""

import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_IMPLS = {"python": _fallback}
if _compiled is not None:
    _IMPLS["compiled"] = _compiled


def available():
    return sorted(_IMPLS)


def _default_name():
    requested = os.environ.get("ISPFORGE_BACKEND", "").strip().lower()
    if requested:
        if requested not in _IMPLS:
            raise ImportError(f"ISPFORGE_BACKEND={requested!r} is not available; have {available()}")
        return requested
    return "compiled" if _compiled is not None else "python"


_active = _default_name()


def name():
    return _active


def kernels():
    return _IMPLS[_active]


def set_backend(which):
    """Switch the active backend; returns the previous name."""
    global _active
    if which not in _IMPLS:
        raise ValueError(f"unknown backend {which!r}; available: {available()}")
    previous, _active = _active, which
    return previous


class use_backend:
    """Context manager that temporarily selects a backend."""

    def __init__(self, which):
        self.which = which

    def __enter__(self):
        self._previous = set_backend(self.which)
        return self

    def __exit__(self, *exc):
        set_backend(self._previous)
