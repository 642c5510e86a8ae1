#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Each backend runs in its own subprocess because the path is chosen at import
time from the AIDE_NUMBA environment variable. Usage:

    python benchmarks/bench_kernels.py            # compare both backends
    python benchmarks/bench_kernels.py --worker   # internal: one backend
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def bench_one(fn, *args, repeats=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def run_worker():
    from aide import kernels

    rng = np.random.default_rng(0)

    boxes_a = np.sort(rng.uniform(0, 500, size=(600, 2, 2)), axis=1).reshape(600, 4)[:, [0, 2, 1, 3]]
    boxes_b = np.sort(rng.uniform(0, 500, size=(600, 2, 2)), axis=1).reshape(600, 4)[:, [0, 2, 1, 3]]
    dense = np.sort(rng.uniform(0, 200, size=(3000, 2, 2)), axis=1).reshape(3000, 4)[:, [0, 2, 1, 3]]
    mat = rng.normal(size=(100_000, 32))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    query = rng.normal(size=32)
    query /= np.linalg.norm(query)
    X = rng.normal(size=(500, 32))
    y = rng.integers(0, 10, size=500).astype(np.int64)
    W = np.zeros((10, 32))
    batches = rng.integers(0, 500, size=(3000, 4))

    results = {
        "backend": kernels.BACKEND,
        "iou_matrix_600x600": bench_one(kernels.iou_matrix, boxes_a, boxes_b),
        "nms_keep_3000": bench_one(kernels.nms_keep, dense, 0.5),
        "cosine_scores_100k_d32": bench_one(kernels.cosine_scores, mat, query),
        "sgd_train_3000it_b4": bench_one(
            kernels.sgd_train, W, X, y, batches, 5e-4, 1e-4, repeats=3
        ),
        "softmax_ce_grad_500": bench_one(kernels.softmax_ce_grad, W, X, y, 1e-4),
    }
    print(json.dumps(results))


def run_backend(flag: str) -> dict:
    env = dict(os.environ, AIDE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker"],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    if "--worker" in sys.argv:
        run_worker()
        return
    with_numba = run_backend("1")
    without = run_backend("0")
    print(f"backends: {with_numba['backend']} vs {without['backend']}\n")
    header = f"{'kernel':<28}{'numba':>12}{'numpy':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for key in with_numba:
        if key == "backend":
            continue
        a, b = with_numba[key], without[key]
        print(f"{key:<28}{a * 1e3:>10.3f}ms{b * 1e3:>10.3f}ms{b / a:>9.2f}x")


if __name__ == "__main__":
    main()
