"""Time each kernel on both paths.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numba variants are warmed up once (compilation is excluded).  Prints one
line per kernel with the median wall time of each path.
"""

import argparse
import statistics
import time

import numpy as np

from dronefuse import kernels


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    sig = rng.standard_normal((1, 1 << 14)) + 1j * rng.standard_normal((1, 1 << 14))
    x = rng.standard_normal((32, 32, 32, 16))
    cols = kernels.im2col_numpy(x, 3, 3, 1, 1)
    w = rng.standard_normal((3, 3, 16))
    g = rng.standard_normal((32, 32, 32, 16))
    return {
        "fft_rows 1x16384": ("fft_rows", (sig,)),
        "ifft_rows 1x16384": ("ifft_rows", (sig,)),
        "im2col 32x32x32x16 k3": ("im2col", (x, 3, 3, 1, 1)),
        "col2im 32x32x32x16 k3": ("col2im", (cols, x.shape, 3, 3, 1, 1)),
        "dwconv_forward 32x32x32x16": ("dwconv_forward", (x, w, 1, 1)),
        "dwconv_backward 32x32x32x16": ("dwconv_backward", (x, w, g, 1, 1)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s}")
    for label, (name, argv_) in cases(rng).items():
        np_fn = getattr(kernels, f"{name}_numpy")
        t_np = _median_time(lambda: np_fn(*argv_), args.repeat)
        if kernels.HAVE_NUMBA:
            nb_fn = getattr(kernels, f"{name}_numba")
            nb_fn(*argv_)
            t_nb = f"{1e3 * _median_time(lambda: nb_fn(*argv_), args.repeat):10.2f}"
        else:
            t_nb = f"{'n/a':>10s}"
        print(f"{label:32s} {1e3 * t_np:10.2f} {t_nb}")


if __name__ == "__main__":
    main()
