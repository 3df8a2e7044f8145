"""Kernel backend selection.

Two interchangeable implementations of the hot numeric kernels exist:
``numba_backend`` (nopython-JIT loops, the default) and ``numpy_backend``
(vectorized fallback). The active backend is fixed at import time by the
``SPLITMIX_BACKEND`` environment variable: ``numba``, ``numpy``, or unset /
``auto`` (numba when importable, numpy otherwise). Results are deterministic
per backend; switching backends changes floating-point rounding only.

``benchmarks/bench_kernels.py`` times both backends side by side.
"""

import os

from ..errors import ParameterError
from . import numpy_backend

_KERNEL_NAMES = (
    "matmul",
    "bmm",
    "bmm_nt",
    "bmm_tn",
    "softmax_rows",
    "softmax_rows_backward",
    "layernorm_forward",
    "layernorm_backward",
    "gelu",
    "gelu_backward",
)


def get_backend(name):
    """Return the kernel module for ``name`` ('numba' or 'numpy')."""
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from . import numba_backend

        return numba_backend
    raise ParameterError(f"unknown kernel backend {name!r}")


def _select():
    requested = os.environ.get("SPLITMIX_BACKEND", "auto").strip().lower() or "auto"
    if requested == "auto":
        try:
            return "numba", get_backend("numba")
        except ImportError:
            return "numpy", numpy_backend
    return requested, get_backend(requested)


_active_name, _active = _select()


def backend_name():
    """Name of the backend selected at import time."""
    return _active_name


matmul = _active.matmul
bmm = _active.bmm
bmm_nt = _active.bmm_nt
bmm_tn = _active.bmm_tn
softmax_rows = _active.softmax_rows
softmax_rows_backward = _active.softmax_rows_backward
layernorm_forward = _active.layernorm_forward
layernorm_backward = _active.layernorm_backward
gelu = _active.gelu
gelu_backward = _active.gelu_backward

__all__ = ["backend_name", "get_backend", *_KERNEL_NAMES]
