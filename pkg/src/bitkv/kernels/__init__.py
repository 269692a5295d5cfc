"""Hot tile kernels with a numba backend and a pure-numpy fallback.

The backend is picked once at import: ``BITKV_KERNELS=numpy`` forces the
fallback, and it is also used when numba cannot be imported.  Both backends
are importable through :func:`get_backend` for comparison.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _numpy

BACKENDS = ("numba", "numpy")


def get_backend(name: str) -> ModuleType:
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; choose from {BACKENDS}")
    return importlib.import_module(f"{__name__}._{name}")


def _select() -> tuple[str, ModuleType]:
    requested = os.environ.get("BITKV_KERNELS", "numba").strip().lower()
    if requested == "numpy":
        return "numpy", _numpy
    try:
        return "numba", get_backend("numba")
    except ImportError:
        return "numpy", _numpy


BACKEND, _impl = _select()

popcount = _impl.popcount
encode_tiles = _impl.encode_tiles
decode_tiles = _impl.decode_tiles
spmv_keys = _impl.spmv_keys
weighted_values = _impl.weighted_values

__all__ = [
    "BACKEND",
    "BACKENDS",
    "get_backend",
    "popcount",
    "encode_tiles",
    "decode_tiles",
    "spmv_keys",
    "weighted_values",
]
