"""Compare the compiled and numpy im2col/col2im kernels, and conv2d end to end.

Run: python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

from aerialformer.tensor import _kernels_py

SHAPES = [
    # (n, c, h, w, k, stride, dilation)
    (2, 32, 64, 64, 3, 1, 1),
    (2, 64, 32, 32, 3, 1, 3),
    (1, 96, 56, 56, 3, 2, 1),
    (8, 16, 32, 32, 1, 1, 1),
]


def _out(size, k, stride, dilation):
    return (size - dilation * (k - 1) - 1) // stride + 1


def bench_kernels(repeat):
    try:
        ck = importlib.import_module("aerialformer.tensor._ckernels")
    except ImportError:
        ck = None
        print("compiled core not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape (n,c,h,w,k,s,d)':<28} {'op':<7} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for n, c, h, w, k, s, d in SHAPES:
        xp = rng.standard_normal((n, c, h, w))
        oh, ow = _out(h, k, s, d), _out(w, k, s, d)
        cols = rng.standard_normal((c * k * k, n * oh * ow))
        cases = {
            "im2col": lambda m: m.im2col(xp, k, s, d, oh, ow),
            "col2im": lambda m: m.col2im(cols, n, c, h, w, k, s, d, oh, ow),
        }
        for name, fn in cases.items():
            t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=repeat)) * 1e3
            if ck is None:
                print(f"{str((n, c, h, w, k, s, d)):<28} {name:<7} {t_py:9.2f} {'-':>10} {'-':>8}")
                continue
            np.testing.assert_allclose(fn(ck), fn(_kernels_py), rtol=0, atol=1e-12)
            t_c = min(timeit.repeat(lambda: fn(ck), number=1, repeat=repeat)) * 1e3
            print(f"{str((n, c, h, w, k, s, d)):<28} {name:<7} {t_py:9.2f} {t_c:10.2f} "
                  f"{t_py / t_c:7.2f}x")


_CONV_SNIPPET = """
import timeit, numpy as np
from aerialformer.tensor import Tensor, backward, KERNEL_BACKEND
from aerialformer.tensor.functional import conv2d
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 32, 64, 64)), requires_grad=True)
w = Tensor(rng.standard_normal((32, 32, 3, 3)) * 0.1, requires_grad=True)
def step():
    backward(conv2d(x, w, padding=2, dilation=2).sum())
print(KERNEL_BACKEND, min(timeit.repeat(step, number=1, repeat={repeat})) * 1e3)
"""


def bench_conv(repeat):
    print("\nconv2d forward+backward, [2,32,64,64] * [32,32,3,3], dilation 2")
    for flag in ("0", "1"):
        env = dict(os.environ, AERIALFORMER_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", _CONV_SNIPPET.format(repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  backend {out[0]:<7} {float(out[1]):8.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_conv(args.repeat)


if __name__ == "__main__":
    main()
