"""Backend selection for the hot kernels.

SUPERSEG_NUMBA=0 forces the pure-numpy fallback; SUPERSEG_NUMBA=1 requires
numba and raises if it is missing; unset (or "auto") uses numba when
importable. The choice is made once at import time so a whole process runs
one backend, which keeps runs bitwise reproducible.

`benchmarks/bench_kernels.py` compares the two backends directly.
"""

import os

from . import kernels_numpy

_FLAG = os.environ.get("SUPERSEG_NUMBA", "auto").strip().lower()

if _FLAG in ("0", "false", "off", "no"):
    HAS_NUMBA = False
    _impl = kernels_numpy
else:
    try:
        from . import kernels_numba as _impl

        HAS_NUMBA = True
    except ImportError:
        if _FLAG in ("1", "true", "on", "yes"):
            raise
        HAS_NUMBA = False
        _impl = kernels_numpy

BACKEND = "numba" if HAS_NUMBA else "numpy"

segment_sum = _impl.segment_sum
conv_forward = _impl.conv_forward
conv_backward_feats = _impl.conv_backward_feats
conv_backward_weights = _impl.conv_backward_weights
