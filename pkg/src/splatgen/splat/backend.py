"""Rasterizer backend selection.

The compiled Cython kernel is preferred when built; the NumPy fallback is
always available. ``SPLATGEN_BACKEND=numpy|cython`` forces a choice (tests
and the benchmark use this to compare both).
"""

import os

from . import _kernels_np

_cy = None
try:
    from . import _rasterize_cy as _cy  # noqa: F401
except ImportError:
    _cy = None


def available_backends():
    return ("cython", "numpy") if _cy is not None else ("numpy",)


def get_kernels(name=None):
    name = name or os.environ.get("SPLATGEN_BACKEND", "")
    if name == "numpy":
        return _kernels_np
    if name == "cython":
        if _cy is None:
            raise ImportError("compiled rasterizer not available; rebuild the package")
        return _cy
    return _cy if _cy is not None else _kernels_np


def backend_name():
    return "cython" if get_kernels() is not _kernels_np else "numpy"
