"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_pykernels`` are used. Setting ``CATEXPAND_PURE_PYTHON=1``
forces the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

ACT_TANH = _pykernels.ACT_TANH
ACT_SQUARE = _pykernels.ACT_SQUARE

_ckernels = None
if os.environ.get("CATEXPAND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ("cython", "python" or None for the default)."""
    if name is None:
        name = BACKEND
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    return ["cython", "python"] if _ckernels is not None else ["python"]


def activation_code(activation: str) -> int:
    return {"tanh": ACT_TANH, "square": ACT_SQUARE}[activation]
