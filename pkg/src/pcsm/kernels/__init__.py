"""Kernel backend selection.

The compiled extension is preferred when importable; set PCSM_NO_EXT=1 to
force the numpy fallback (used by the parity tests and the benchmark).
"""

import os

from . import reference

if os.environ.get("PCSM_NO_EXT", "") not in ("", "0"):
    _impl = reference
    BACKEND = "numpy"
else:
    try:
        from . import _fused as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "numpy"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adamw_update = _impl.adamw_update


def backend_name() -> str:
    return BACKEND
