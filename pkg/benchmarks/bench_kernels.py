"""Compare the compiled and NumPy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 50]

Times im2col / col2im alone and a full conv2d forward + backward at the
desk-scale shapes, and checks that both backends agree bitwise.
"""
import argparse
import timeit

import numpy as np

from anchor import autodiff as ad
from anchor._kernels import _fallback

try:
    from anchor._kernels import _conv3x3 as compiled
except ImportError:
    compiled = None

SHAPES = [(64, 3, 8, 8), (128, 16, 8, 8), (128, 32, 8, 8)]


def conv_step(impl, x, w):
    import anchor._kernels as k

    saved = k._impl
    k._impl = impl
    try:
        xt = ad.Tensor(x, requires_grad=True)
        wt = ad.Tensor(w, requires_grad=True)
        ad.backward(ad.sum(ad.conv2d(xt, wt)))
    finally:
        k._impl = saved


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()
    if compiled is None:
        print("compiled kernels not built; only the NumPy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':>18} {'kernel':>14} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}  bitwise")
    for shape in SHAPES:
        x = rng.random(shape, dtype=np.float32)
        w = rng.standard_normal((shape[1], shape[1], 3, 3)).astype(np.float32)
        cols = _fallback.im2col(x)
        rows = [
            ("im2col", lambda m: m.im2col(x)),
            ("col2im", lambda m: m.col2im(cols)),
            ("conv fwd+bwd", lambda m: conv_step(m, x, w)),
        ]
        for name, fn in rows:
            t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
            if compiled is None:
                print(f"{str(shape):>18} {name:>14} {t_py:9.3f} {'-':>10} {'-':>8}")
                continue
            t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
            same = "-"
            if name != "conv fwd+bwd":
                same = "yes" if np.array_equal(fn(_fallback), fn(compiled)) else "NO"
            print(f"{str(shape):>18} {name:>14} {t_py:9.3f} {t_c:10.3f} {t_py / t_c:7.2f}x  {same}")


if __name__ == "__main__":
    main()
