"""Global floating-point precision.

Gradient checks and the determinism contract need 64-bit; training defaults
to 32-bit for speed. The setting is process-global: every Tensor created
after a switch uses the new dtype.
"""

from contextlib import contextmanager

import numpy as np

_DTYPE = np.float64

_NAMES = {"f32": np.float32, "f64": np.float64}


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in _NAMES:
        raise ValueError(f"precision must be 'f32' or 'f64', got {name!r}")
    _DTYPE = _NAMES[name]


def get_precision() -> str:
    return "f32" if _DTYPE == np.float32 else "f64"


def dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextmanager
def precision_scope(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)
