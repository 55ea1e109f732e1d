"""Pure-NumPy im2col / col2im for 3x3, stride 1, pad 1 convolutions."""
import numpy as np


def im2col(x):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:H + 1, 1:W + 1] = x
    out = np.empty((B, H, W, C, 3, 3), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            out[..., kh, kw] = xp[:, :, kh:kh + H, kw:kw + W].transpose(0, 2, 3, 1)
    return out


def col2im(cols):
    B, H, W, C = cols.shape[:4]
    padded = np.zeros((B, C, H + 2, W + 2), dtype=cols.dtype)
    for kh in range(3):
        for kw in range(3):
            padded[:, :, kh:kh + H, kw:kw + W] += cols[..., kh, kw].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(padded[:, :, 1:H + 1, 1:W + 1])
