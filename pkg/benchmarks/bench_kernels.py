"""Time the LSTM kernels on each available backend.

    python benchmarks/bench_kernels.py [--batch 16] [--steps 2048] [--units 100]
"""

import argparse
import time

import numpy as np

from seizure_lstm import kernels, nncore


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--steps", type=int, default=2048)
    ap.add_argument("--units", type=int, default=100)
    ap.add_argument("--segment", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    params = nncore.init_params(args.units, args.segment, 50, 2, rng)
    X = rng.normal(size=(args.batch, args.steps, args.segment))
    labels = rng.integers(0, 2, size=args.batch)
    print(f"batch {args.batch}, M={args.steps}, B={args.units}, L={args.segment}")
    results = {}
    for name in kernels.available_backends():
        fwd = best_of(lambda: nncore.forward_batch(params, X, name), args.repeat)
        both = best_of(lambda: nncore.loss_and_grad(params, X, labels, name), args.repeat)
        results[name] = (fwd, both)
        print(f"{name:>7}: forward {fwd * 1e3:9.1f} ms   forward+backward {both * 1e3:9.1f} ms")
    if len(results) == 2:
        (pf, pb), (cf, cb) = results["python"], results["cython"]
        print(f"speedup: forward {pf / cf:.1f}x, forward+backward {pb / cb:.1f}x")


if __name__ == "__main__":
    main()
