"""Global precision mode.

Training runs in single precision; gradient and oracle verification runs in
double precision. The mode is process-wide and read from ``ANCHOR_PRECISION``
(``f32`` or ``f64``) at import time.
"""
import contextlib
import os

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _from_env():
    name = os.environ.get("ANCHOR_PRECISION", "f32").strip().lower()
    if name not in _DTYPES:
        raise ValueError(f"ANCHOR_PRECISION must be one of {sorted(_DTYPES)}, got {name!r}")
    return name


_mode = _from_env()


def get_precision() -> str:
    return _mode


def set_precision(name: str) -> None:
    global _mode
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _mode = name


def dtype():
    return _DTYPES[_mode]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the precision mode."""
    old = _mode
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)
