"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
reference is used. Set ``TC_KERNEL=python`` to force the fallback.
"""
import os

from . import _pykernel
from .layout import LAYOUT

_forced = os.environ.get("TC_KERNEL", "").strip().lower()

if _forced == "python":
    kernel = _pykernel
else:
    try:
        from . import _ckernel as kernel
    except ImportError:  # extension not built
        if _forced == "cython":
            raise
        kernel = _pykernel

BACKEND = kernel.BACKEND


def available_backends() -> dict:
    """Name -> module for every backend importable in this process."""
    out = {"python": _pykernel}
    try:
        from . import _ckernel
        out["cython"] = _ckernel
    except ImportError:
        pass
    return out


__all__ = ["kernel", "BACKEND", "LAYOUT", "available_backends"]
