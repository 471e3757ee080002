"""Hot-kernel dispatch.

The numba backend is used by default; set ``PANOSAL_NUMBA=0`` to force the
pure-numpy fallback (useful for debugging and as a reference path). The
selection happens once at import. ``benchmarks/bench_kernels.py`` compares
the two.
"""

import os

from . import numpy_backend
from .numpy_backend import out_size

_flag = os.environ.get("PANOSAL_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "off", "no")

if NUMBA_REQUESTED:
    try:
        from . import numba_backend as _backend

        NUMBA_ACTIVE = True
    except ImportError:  # no numba in the environment
        _backend = numpy_backend
        NUMBA_ACTIVE = False
else:
    _backend = numpy_backend
    NUMBA_ACTIVE = False

BACKEND_NAME = "numba" if NUMBA_ACTIVE else "numpy"

unfold = _backend.unfold
fold = _backend.fold
dcn_sample = _backend.dcn_sample
dcn_sample_grads = _backend.dcn_sample_grads

__all__ = [
    "BACKEND_NAME",
    "NUMBA_ACTIVE",
    "NUMBA_REQUESTED",
    "dcn_sample",
    "dcn_sample_grads",
    "fold",
    "out_size",
    "unfold",
]
