"""Central finite-difference verification of analytic gradients."""
import numpy as np

from anchor import autodiff as ad
from anchor.config import get_precision


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_check(f, x, step=1e-3):
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps a Tensor to a scalar Tensor. Requires double precision.
    """
    if get_precision() != "f64":
        raise RuntimeError("finite_diff_check requires double precision (ANCHOR_PRECISION=f64)")
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(ad.as_tensor(x).values, dtype=np.float64)

    with ad.no_grad():
        first = f(ad.Tensor(x0)).item()
        second = f(ad.Tensor(x0)).item()
    if first != second:
        raise NonDeterministicError(f"f returned {first!r} then {second!r} at the same point")

    leaf = ad.Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.requires_grad:
        ad.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with ad.no_grad():
        for k in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[k] += step
            xm[k] -= step
            fp = f(ad.Tensor(xp.reshape(x0.shape))).item()
            fm = f(ad.Tensor(xm.reshape(x0.shape))).item()
            flat[k] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
