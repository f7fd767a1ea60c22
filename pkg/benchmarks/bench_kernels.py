"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--reps 200]

Times the two operations the simulator spends its life in: a forward
pass and a fused loss+gradient evaluation, across the batch/width
regimes the experiments actually use. Small shapes are where the
compiled path pays off; large ones are BLAS-bound either way.
"""

import argparse
import time

import numpy as np

from fedfair import backend, nn


def timed(fn, reps):
    best = float("inf")
    for _ in range(max(3, reps // 20)):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def bench_case(sizes, batch, reps):
    rng = np.random.default_rng(0)
    model = nn.MLP.init(sizes, "relu", rng)
    data = nn.Batch(rng.normal(size=(batch, sizes[0])), rng.integers(0, sizes[-1], batch))
    rows = {}
    for name in backend.available_backends():
        backend.use_backend(name)
        rows[name] = (
            timed(lambda: nn.forward(model, data), reps),
            timed(lambda: nn.loss_and_grad(model, data), reps),
        )
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=200)
    args = parser.parse_args()

    if "compiled" not in backend.available_backends():
        print("compiled extension not built; nothing to compare "
              "(pip install -e . --no-build-isolation)")
        return

    cases = [
        ([12, 24, 4], 1),
        ([12, 24, 4], 64),
        ([12, 24, 4], 256),
        ([16, 32, 32, 4], 64),
        ([64, 128, 10], 64),
        ([300, 320, 10], 64),
    ]
    prev = backend.active_backend()
    print(f"{'sizes':>18} {'batch':>5} | {'fwd py':>9} {'fwd c':>9} {'speedup':>7} "
          f"| {'grad py':>9} {'grad c':>9} {'speedup':>7}")
    try:
        for sizes, batch in cases:
            rows = bench_case(sizes, batch, args.reps)
            f_py, g_py = rows["python"]
            f_c, g_c = rows["compiled"]
            print(f"{str(sizes):>18} {batch:>5} | {f_py * 1e6:>7.1f}us {f_c * 1e6:>7.1f}us "
                  f"{f_py / f_c:>6.1f}x | {g_py * 1e6:>7.1f}us {g_c * 1e6:>7.1f}us "
                  f"{g_py / g_c:>6.1f}x")
    finally:
        backend.use_backend(prev)


if __name__ == "__main__":
    main()
