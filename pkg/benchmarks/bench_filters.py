"""Compare the compiled and numpy recursive-filter backends.

Usage: python3 benchmarks/bench_filters.py [--size 192 256] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from hybrid_depth import kernels


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, nargs=2, default=[192, 256], metavar=("H", "W"))
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    h, w = args.size
    gen = np.random.default_rng(0)
    img = gen.random((h, w, 3))
    coef = gen.uniform(0.0, 1.0, (h, w))

    backends = {"numpy": kernels.recursive_filter_rows_py}
    if kernels.BACKEND == "cython":
        backends["cython"] = kernels.recursive_filter_rows
    else:
        print("compiled extension unavailable; timing the numpy fallback only")

    times = {}
    for name, fn in backends.items():
        runs = timeit.repeat(lambda: fn(img.copy(), coef), number=1, repeat=args.repeat)
        times[name] = min(runs)
        print(f"{name:>7}: {1e3 * times[name]:8.2f} ms per {h}x{w}x3 pass (best of {args.repeat})")
    if len(times) == 2:
        print(f"speedup: {times['numpy'] / times['cython']:.1f}x")


if __name__ == "__main__":
    main()
