# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for 3x3, stride 1, pad 1 convolutions.

Column layout is ``[B, H, W, C, 3, 3]``. ``col2im`` accumulates the nine
kernel taps in (kh, kw) order starting from zero, which is the same order the
NumPy fallback uses, so both backends agree bitwise.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dt = np.float32 if real is float else np.float64
    out = np.zeros((B, H, W, C, 3, 3), dtype=dt)
    cdef real[:, :, :, :, :, ::1] o = out
    cdef Py_ssize_t b, c, h, w, kh, kw, ih, iw
    with nogil:
        for b in range(B):
            for h in range(H):
                for w in range(W):
                    for c in range(C):
                        for kh in range(3):
                            ih = h + kh - 1
                            if ih < 0 or ih >= H:
                                continue
                            for kw in range(3):
                                iw = w + kw - 1
                                if iw < 0 or iw >= W:
                                    continue
                                o[b, h, w, c, kh, kw] = x[b, c, ih, iw]
    return out


def col2im(real[:, :, :, :, :, ::1] cols):
    cdef Py_ssize_t B = cols.shape[0], H = cols.shape[1], W = cols.shape[2], C = cols.shape[3]
    dt = np.float32 if real is float else np.float64
    padded = np.zeros((B, C, H + 2, W + 2), dtype=dt)
    cdef real[:, :, :, ::1] p = padded
    cdef Py_ssize_t b, c, h, w, kh, kw
    with nogil:
        for kh in range(3):
            for kw in range(3):
                for b in range(B):
                    for c in range(C):
                        for h in range(H):
                            for w in range(W):
                                p[b, c, h + kh, w + kw] += cols[b, h, w, c, kh, kw]
    return np.ascontiguousarray(padded[:, :, 1:H + 1, 1:W + 1])
