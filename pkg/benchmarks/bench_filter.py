"""Compare the compiled and numpy pixel-wise filter backends.

    python benchmarks/bench_filter.py [--size 128] [--k 5] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from nightlift import backend
from nightlift.imaging import KernelField, apply_pixelwise_filter, filter_gradients


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--k", type=int, default=5)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--per-channel", action="store_true")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n, k = args.size, args.k
    img = rng.random((n, n, 3))
    P = k * k * (3 if args.per_channel else 1)
    kernels = KernelField(rng.normal(size=(P, n, n)), k, args.per_channel)
    up = rng.normal(size=img.shape)

    print(f"image {n}x{n}x3, k={k}, per_channel={args.per_channel}, best of {args.repeat}")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    timings = {}
    for name in sorted(backend.BACKENDS):
        fwd = min(timeit.repeat(lambda: apply_pixelwise_filter(img, kernels, impl=name), number=1,
                                repeat=args.repeat))
        bwd = min(timeit.repeat(lambda: filter_gradients(img, kernels, up, impl=name), number=1,
                                repeat=args.repeat))
        timings[name] = (fwd, bwd)
        print(f"{name:<8} {fwd * 1e3:>11.2f} {bwd * 1e3:>12.2f}")
    if len(timings) == 2:
        (pf, pb), (cf, cb) = timings["python"], timings["cython"]
        print(f"speed-up forward {pf / cf:.1f}x, backward {pb / cb:.1f}x")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
