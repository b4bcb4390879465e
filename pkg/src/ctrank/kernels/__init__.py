"""Hot numeric kernels with a compiled core and a NumPy fallback.

The Cython extension is picked at import time when present; set
CTRANK_PURE_PYTHON=1 to force the NumPy implementations.  Both backends
expose the same functions and agree within float rounding (see
tests/test_kernels.py and benchmarks/kernel_bench.py).
"""

import os

from . import reference

if os.environ.get("CTRANK_PURE_PYTHON"):
    _impl = reference
else:
    try:
        from . import _fastops as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = reference

BACKEND = _impl.BACKEND

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adam_step = _impl.adam_step
