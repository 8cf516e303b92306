"""Time the numba kernels against the pure-numpy fallback and check they agree.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both backends are imported directly, so CASCADE_SEG_NO_NUMBA has no effect here.
"""
import argparse
import time

import numpy as np

from cascade_seg.kernels import _numba, _numpy


def best_of(fn, repeats):
    fn()  # warm-up, includes JIT compilation on first call
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_case(rng):
    x = rng.standard_normal((8, 16, 66, 66)).astype(np.float32)
    cols = _numpy.im2col(x, 3, 3, 1)
    return x, cols


def crf_case(rng, n=3000):
    shape = (8, 40, 40)
    flat = rng.choice(np.prod(shape), size=n, replace=False)
    coords = np.stack(np.unravel_index(np.sort(flat), shape), axis=1).astype(np.int64)
    intensity = rng.random(n)
    tables = [tuple(np.exp(-np.arange(s) ** 2 / (2 * th ** 2)) for s in shape) for th in (3.0, 1.5)]
    return coords, intensity, tables


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    x, cols = conv_case(rng)
    coords, intensity, (app, smooth) = crf_case(rng)
    n = len(coords)
    mk = rng.random((8192, 8192), dtype=np.float32)
    mq = rng.random((8192, 2))

    def crf(mod):
        return lambda: mod.crf_kernel_matrix(coords, intensity, app, smooth, 50.0, 3.0, 1.0,
                                             np.empty((n, n)))

    cases = [
        ("im2col (8,16,66,66) k3", lambda: _numpy.im2col(x, 3, 3, 1), lambda: _numba.im2col(x, 3, 3, 1)),
        ("col2im (8,16,66,66) k3", lambda: _numpy.col2im(cols, x.shape, 1),
         lambda: _numba.col2im(cols, x.shape, 1)),
        (f"crf kernel n={n}", crf(_numpy), crf(_numba)),
        (f"crf messages n={mk.shape[0]}", lambda: _numpy.potts_messages(mk, mq),
         lambda: _numba.potts_messages(mk, mq)),
    ]
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max |diff|")
    for name, f_np, f_nb in cases:
        diff = float(np.max(np.abs(f_np().astype(np.float64) - f_nb().astype(np.float64))))
        t_np, t_nb = best_of(f_np, args.repeats), best_of(f_nb, args.repeats)
        print(f"{name:<26} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}  {diff:.1e}")


if __name__ == "__main__":
    main()
