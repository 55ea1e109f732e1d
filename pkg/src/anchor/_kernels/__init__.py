"""Convolution kernels: compiled extension when available, NumPy otherwise.

Set ``ANCHOR_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("ANCHOR_KERNELS", "auto").lower() != "python":
    try:
        from . import _conv3x3 as _compiled
    except ImportError:
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x):
    return _impl.im2col(np.ascontiguousarray(x))


def col2im(cols):
    return _impl.col2im(np.ascontiguousarray(cols))
