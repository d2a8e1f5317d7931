"""Time the compiled kernels against the numpy reference.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5]
"""
import argparse
import time

import numpy as np

from f2pad import kernels
from f2pad.kernels import reference


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    x = rng.normal(size=(size, size, 3))
    g = rng.normal(size=(size, size, 3))
    w = reference.sharing_weights(x, 5, 1.1, 3.0)
    mask = np.zeros((size, size), bool)
    q = size // 4
    mask[q : 3 * q, q : 3 * q] = True
    feats = rng.normal(size=(4 * size * size // 4, 48))
    return [
        ("sharing_weights ks=5", lambda impl: impl.sharing_weights(x, 5, 1.1, 3.0)),
        ("share ks=5", lambda impl: impl.share(w, g, 5)),
        ("jacobi_inpaint", lambda impl: impl.jacobi_inpaint(x, mask, 1e-6, 10000)),
        ("farthest_point m=10%", lambda impl: impl.farthest_point(feats, len(feats) // 10, 0)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not built; only the reference is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'reference':>12s} {'compiled':>12s} {'speedup':>8s}")
    for name, run in cases(args.size, rng):
        t_ref = best_of(lambda: run(reference), args.repeat)
        if kernels.compiled is None:
            print(f"{name:24s} {t_ref * 1e3:10.2f}ms {'-':>12s} {'-':>8s}")
            continue
        t_c = best_of(lambda: run(kernels.compiled), args.repeat)
        print(f"{name:24s} {t_ref * 1e3:10.2f}ms {t_c * 1e3:10.2f}ms {t_ref / t_c:7.1f}x")


if __name__ == "__main__":
    main()
