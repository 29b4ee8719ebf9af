"""Kernel backend selection.

The compiled extension is preferred when importable; set
``TCRLAB_PURE_PYTHON=1`` to force the numpy fallback.  Both backends
expose the same functions; see ``numpy_backend`` for the contracts.
"""

import os

from . import numpy_backend

if os.environ.get("TCRLAB_PURE_PYTHON", "") not in ("", "0"):
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from tcrlab import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

masked_softmax_fwd = _impl.masked_softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
adamw_update = _impl.adamw_update


def backend_name():
    return BACKEND
