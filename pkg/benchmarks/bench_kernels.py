"""Compare the compiled kernels with the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Workloads match how the kernels are called: one 1-D k-means per image on the
ViT-S patch grid (N=256) and ranking metrics over a University-1652-sized
relevance matrix.
"""

import argparse
import timeit

import numpy as np

from asageo import _kernels_py
from asageo.asa import init_centers

try:
    from asageo import _kernels as _compiled
except ImportError:
    _compiled = None


def workloads(rng):
    batch = [rng.normal(size=256) for _ in range(64)]
    inits = {k: [init_centers(q, k) for q in batch] for k in (2, 4)}

    def kmeans(impl, k):
        def run():
            for q, c in zip(batch, inits[k]):
                impl.kmeans_1d(q, c)
        return run

    rel_small = (rng.random((701, 951)) < 1 / 951).astype(np.uint8)
    rel_large = (rng.random((4000, 951)) < 1 / 951).astype(np.uint8)
    return [
        ("kmeans_1d  N=256 K=2 x64 images", lambda impl: kmeans(impl, 2)),
        ("kmeans_1d  N=256 K=4 x64 images", lambda impl: kmeans(impl, 4)),
        ("ranking_metrics 701 x 951", lambda impl: (lambda: impl.ranking_metrics(rel_small))),
        ("ranking_metrics 4000 x 951", lambda impl: (lambda: impl.ranking_metrics(rel_large))),
    ]


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'workload':<34} {'numpy [ms]':>11} {'cython [ms]':>12} {'speedup':>8}")
    for name, make in workloads(np.random.default_rng(args.seed)):
        py = best_time(make(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:<34} {py * 1e3:11.3f} {'-':>12} {'-':>8}")
            continue
        cy = best_time(make(_compiled), args.repeat)
        print(f"{name:<34} {py * 1e3:11.3f} {cy * 1e3:12.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
