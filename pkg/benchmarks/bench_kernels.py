"""Compare the compiled and numpy retrieval kernels on a synthetic index.

    python benchmarks/bench_kernels.py --n 100000 --queries 500 --k 10
"""

import argparse
import statistics
import time

import numpy as np

from liftrec import kernels
from liftrec.retriever import InvertedIndex


def build(n: int, m: int, vocab: list[int], seed: int) -> tuple[InvertedIndex, np.ndarray]:
    rng = np.random.default_rng(seed)
    # skewed values so that some posting lists are long, as with popular items
    keys = np.stack([np.minimum(rng.zipf(1.3, size=n), v) for v in vocab[:m]], axis=1)
    return InvertedIndex(keys, np.arange(n)), keys


def time_backend(index: InvertedIndex, queries: np.ndarray, k: int, backend: str, repeats: int) -> list[float]:
    index.search(queries[:5], k, backend=backend)  # warm-up
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        index.search(queries, k, backend=backend)
        out.append(time.perf_counter() - t)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000, help="indexed samples")
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    vocab = [5000, 2000, 50]
    index, keys = build(args.n, 3, vocab, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    queries = keys[rng.integers(0, args.n, size=args.queries)]

    results = {}
    for name in sorted(kernels.BACKENDS):
        results[name] = index.search(queries, args.k, backend=name)
        runs = time_backend(index, queries, args.k, name, args.repeats)
        per_q = statistics.median(runs) / args.queries * 1e6
        print(f"{name:8s} median {statistics.median(runs) * 1e3:9.2f} ms  ({per_q:8.1f} us/query)")
        results[name + "_t"] = statistics.median(runs)

    if "cython" in kernels.BACKENDS:
        same = all(np.array_equal(a, b, equal_nan=True) for a, b in zip(results["cython"], results["python"]))
        print(f"identical results: {same}")
        print(f"speed-up: {results['python_t'] / results['cython_t']:.1f}x")
    else:
        print("compiled kernel not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
