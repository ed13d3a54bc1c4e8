"""Compare the compiled and numpy im2col/col2im kernels on toy-resnet sized tensors.

    python benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import timeit

import numpy as np

from gator import kernels

SHAPES = [  # (N, C, H, W, k, stride, pad)
    (64, 3, 16, 16, 3, 1, 1),
    (64, 8, 16, 16, 3, 1, 1),
    (64, 16, 8, 8, 3, 2, 1),
    (64, 32, 4, 4, 3, 1, 1),
    (8, 64, 56, 56, 3, 1, 1),
]


def bench(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args(argv)
    if kernels._compiled is None:
        print("compiled kernels unavailable; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<28} {'kernel':<7} {'numpy ms':>9} {'compiled ms':>12} {'speedup':>8}")
    for n, c, h, w, k, s, pad in SHAPES:
        x = rng.standard_normal((n, c, h, w))
        cols = kernels.im2col_numpy(x, k, k, s, pad)
        cases = {
            "im2col": (lambda: kernels.im2col_numpy(x, k, k, s, pad),
                       lambda: kernels._compiled.im2col(x, k, k, s, pad, 0.0)),
            "col2im": (lambda: kernels.col2im_numpy(cols, n, c, h, w, k, k, s, pad),
                       lambda: kernels._compiled.col2im(cols, n, c, h, w, k, k, s, pad)),
        }
        for name, (py, cy) in cases.items():
            t_py = bench(py, args.repeats) * 1e3
            if kernels._compiled is None:
                print(f"{str((n, c, h, w, k, s)):<28} {name:<7} {t_py:9.3f} {'-':>12} {'-':>8}")
                continue
            assert np.array_equal(py(), cy()), f"backends disagree on {name} {(n, c, h, w)}"
            t_cy = bench(cy, args.repeats) * 1e3
            print(f"{str((n, c, h, w, k, s)):<28} {name:<7} {t_py:9.3f} {t_cy:12.3f} {t_py / t_cy:7.2f}x")


if __name__ == "__main__":
    main()
