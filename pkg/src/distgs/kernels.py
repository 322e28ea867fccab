"""Selects the compositing kernel backend at import time.

The compiled extension is used when it imports cleanly; otherwise, or when
``DISTGS_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""
import os

if os.environ.get("DISTGS_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

forward = _impl.forward
backward_tile_row = _impl.backward_tile_row
BACKEND = _impl.BACKEND


def get_backend(name=None):
    """Return the kernel module by name (``"cython"`` or ``"numpy"``)."""
    if name is None:
        return _impl
    if name == "numpy":
        from . import _kernels_py
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
