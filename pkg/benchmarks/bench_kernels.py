"""Compare the compiled and numpy kernel backends on the sparse update path.

    python3 benchmarks/bench_kernels.py [--n 4096] [--rate 0.01] [--repeat 200]

One "step" is what a masked tensor goes through per optimizer step:
gather from the dense gradient, AdamW on the gathered values, scatter back.
"""
import argparse
import time

import numpy as np

from siftlab import kernels


def one_backend(name, n, k, repeat, seed=0):
    mod = kernels.backend_module(name)
    rng = np.random.default_rng(seed)
    grad = rng.standard_normal(n * n)
    param = rng.standard_normal(n * n)
    idx = np.sort(rng.choice(n * n, k, replace=False)).astype(np.int64)
    base = param[idx].copy()
    delta, m, v, acc = (np.zeros(k) for _ in range(4))
    best = float("inf")
    for t in range(1, repeat + 1):
        start = time.perf_counter()
        acc[:] = 0
        mod.gather_add(acc, grad, idx)
        mod.sparse_adamw(delta, base, m, v, acc, 1e-3, 0.9, 0.999, 1e-8, 0.01, 1 - 0.9 ** t, 1 - 0.999 ** t)
        mod.scatter_merge(param, idx, base, delta)
        best = min(best, time.perf_counter() - start)
    return best, param


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1024, help="tensor is n x n")
    ap.add_argument("--rate", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    k = max(1, int(args.rate * args.n * args.n))
    print(f"tensor {args.n}x{args.n}, {k} masked entries, best of {args.repeat}")
    results = {}
    for name in kernels.available_backends():
        t, out = one_backend(name, args.n, k, args.repeat)
        results[name] = out
        print(f"  {name:7s} {t * 1e6:9.1f} us/step")
    if len(results) == 2:
        same = results["python"].tobytes() == results["cython"].tobytes()
        print(f"  outputs bitwise equal: {same}")
    else:
        print("  compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
