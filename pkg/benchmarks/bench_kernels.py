"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ralf._ext import pykernels

try:
    from ralf._ext import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def cases(rng: np.random.Generator) -> dict:
    boxes = np.column_stack([rng.random((10, 2)), rng.uniform(0.01, 0.5, (10, 2))])
    emb = rng.standard_normal((5000, 64))
    rank = np.arange(5000, dtype=np.int64)
    real, gen = rng.standard_normal((1000, 64)), rng.standard_normal((1000, 64))
    radii = rng.uniform(8.0, 12.0, 1000)
    return {
        "intersection_matrix (T=10)": lambda m: m.intersection_matrix(boxes),
        "alignment (T=10)": lambda m: m.alignment(boxes),
        "knn_scan (N=5000, d=64, k=16)": lambda m: m.knn_scan(emb, emb[0], 16, 0, rank),
        "ball_counts (1000x1000, d=64)": lambda m: m.ball_counts(real, gen, radii),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    print(f"{'kernel':<32}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for label, mod in (("python", pykernels), ("cython", compiled)):
            if mod is None:
                continue
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            times[label] = min(timer.repeat(args.repeat, number)) / number * 1e6
        py, cy = times["python"], times.get("cython")
        cy_col = "n/a" if cy is None else f"{cy:.1f}"
        ratio = "" if cy is None else f"{py / cy:.2f}x"
        print(f"{name:<32}{py:>12.1f}{cy_col:>12}{ratio:>10}")


if __name__ == "__main__":
    main()
