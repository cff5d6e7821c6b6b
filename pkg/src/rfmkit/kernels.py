"""Backend selection for the hot kernels.

The compiled extension is used when it was built; setting
``RFMKIT_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_active = _kernels_py

if os.environ.get("RFMKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        _active = _compiled

affine_euler = _active.affine_euler
atomic_euler = _active.atomic_euler
spd2_importance = _active.spd2_importance


def get_backend(name):
    """Module holding the kernels of a named backend (``python`` or ``cython``)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
