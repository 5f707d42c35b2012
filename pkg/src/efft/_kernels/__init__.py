"""Kernel backend selection.

The compiled module is used when it was built; set ``EFFT_PURE_PYTHON=1``
to force the numpy fallback. Both expose the same functions.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("EFFT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = active.BACKEND

__all__ = ["BACKEND", "active", "compiled_backend", "python_backend"]
