"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from deskpaws.kernels import backends

# (rows, cols): a batch of view embeddings, a support similarity block and
# the probability rows the loss works on
SIZES = [(544, 32), (512, 40), (512, 4)]


def cases(rng, rows, cols):
    a = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    p = rng.dirichlet(np.ones(cols), size=rows)
    t = rng.dirichlet(np.ones(cols), size=rows)
    return {
        "softmax": lambda k: k.softmax_rows(a, 0.1),
        "softmax_bwd": lambda k: k.softmax_rows_backward(p, g, 0.1),
        "l2_normalize": lambda k: k.l2_normalize_rows(a, 1e-12),
        "l2_normalize_bwd": lambda k: k.l2_normalize_rows_backward(a, g, 1e-12),
        "sharpen": lambda k: k.sharpen_rows(p, 0.25, 1e-12),
        "cross_entropy": lambda k: k.cross_entropy_rows(t, p, 1e-12),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    impls = backends()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    names = list(impls)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'shape':>10}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for rows, cols in SIZES:
        for name, fn in cases(rng, rows, cols).items():
            times = {}
            for n in names:
                k = impls[n]
                times[n] = min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat * 1e6
            speed = f"{times['python'] / times['cython']:>9.2f}x" if "cython" in times else ""
            print(f"{name:<18}{f'{rows}x{cols}':>10}" + "".join(f"{times[n]:>14.1f}" for n in names) + speed)


if __name__ == "__main__":
    main()
