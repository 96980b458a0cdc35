"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints best-of-N wall time per backend and checks the outputs agree bit for
bit. Without the compiled extension only the fallback is timed.
"""
import argparse
import time

import numpy as np

from causalgcl.kernels import available_backends


def random_csr(rng, n_rows, n_cols, nnz_per_row):
    cols = np.concatenate([np.sort(rng.choice(n_cols, nnz_per_row, replace=False)) for _ in range(n_rows)])
    indptr = np.arange(0, n_rows * nnz_per_row + 1, nnz_per_row, dtype=np.int64)
    return indptr, cols.astype(np.int64), rng.random(cols.size)


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    indptr, indices, data = random_csr(rng, 20000, 20000, 20)
    dense = rng.standard_normal((20000, 64))
    yield "spmm 20k x 20k, 20 nnz/row, d=64", "spmm_csr", (indptr, indices, data, dense)
    points = rng.standard_normal((50000, 128))
    centroids = rng.standard_normal((8, 128))
    yield "kmeans_assign n=50k, d=128, k=8", "kmeans_assign", (points, centroids)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = available_backends()
    rng = np.random.default_rng(args.seed)
    print(f"{'case':<36} " + " ".join(f"{b:>10}" for b in backends) + f" {'speedup':>8} {'equal':>6}")
    for label, name, inputs in cases(rng):
        times, outs = {}, {}
        for b, mod in backends.items():
            times[b], outs[b] = best_of(lambda: getattr(mod, name)(*inputs), args.repeat)
        ref = outs["python"]
        ref = ref if isinstance(ref, tuple) else (ref,)
        same = all(
            all(np.array_equal(x, y) for x, y in zip(ref, o if isinstance(o, tuple) else (o,)))
            for o in outs.values()
        )
        speed = f"{times['python'] / times['cython']:.1f}x" if "cython" in times else "-"
        cols = " ".join(f"{times[b] * 1e3:>8.1f}ms" for b in backends)
        print(f"{label:<36} {cols} {speed:>8} {str(same):>6}")


if __name__ == "__main__":
    main()
