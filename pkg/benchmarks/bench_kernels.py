"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--sizes 16 64 256]

Numba compilation happens in a warm-up call and is reported separately.
Each line also checks that both paths agree to 1e-10.
"""
import argparse
import time

import numpy as np

from udareg import _kernels as K


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    x, y = rng.normal(size=(n, 32)), rng.normal(size=(n, 32))
    a = rng.uniform(0, 10, size=(n, n))
    d = np.triu(a, 1) + np.triu(a, 1).T
    c = rng.normal(size=n)
    return {
        "sq_dists": ((x, y), K.sq_dists_numpy, K.sq_dists_numba),
        "gaussian_gram": ((x, y, 1.5), K.gaussian_gram_numpy, K.gaussian_gram_numba),
        "guttman_1d": ((d, c), K.guttman_1d_numpy, K.guttman_1d_numba),
        "stress_1d": ((d, c), K.stress_1d_numpy, K.stress_1d_numba),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    warm = cases(4, rng)
    t0 = time.perf_counter()
    for inputs, _, fast in warm.values():
        fast(*inputs)
    print(f"numba warm-up (compile or cache load): {time.perf_counter() - t0:.2f}s\n")

    print(f"{'kernel':<14} {'n':>5} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for n in args.sizes:
        for name, (inputs, slow, fast) in cases(n, rng).items():
            t_np = best_of(slow, inputs, args.repeat)
            t_nb = best_of(fast, inputs, args.repeat)
            agree = np.allclose(slow(*inputs), fast(*inputs), rtol=0, atol=1e-10)
            print(f"{name:<14} {n:>5} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
                  f"{t_np / t_nb:>7.1f}x  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
