"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--rows 512] [--dim 128]

Each kernel is run once per backend before timing so numba compilation is
not counted.  Outputs of the two backends are compared before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from asyndbt._kernels import implementations


def workloads(rows, dim, samples, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5.0, 5.0, (rows, dim))
    probs = rng.dirichlet(np.ones(dim), rows)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((samples, rows))
    idx = np.minimum((u[..., None] > cdf[None]).sum(axis=-1), dim - 1).astype(np.int64)
    weights = rng.normal(size=samples)
    return {
        "project_rows": (x,),
        "sample_cdf": (cdf, u),
        "score_accumulate": (idx, weights, probs, 1e-6),
    }


def same_output(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, atol=1e-10) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rows", type=int, default=512)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = implementations()
    inputs = workloads(args.rows, args.dim, args.samples, args.seed)
    print(f"rows={args.rows} dim={args.dim} samples={args.samples} repeat={args.repeat}")
    print(f"{'kernel':<18}{'backend':<9}{'best ms':>10}{'speedup':>10}")
    for name, backends in impls.items():
        call_args = inputs[name]
        results = {b: fn(*call_args) for b, fn in backends.items()}  # warm-up / compile
        if "numba" in results and not same_output(results["numba"], results["numpy"]):
            raise SystemExit(f"{name}: backends disagree")
        times = {
            b: min(timeit.repeat(lambda fn=fn: fn(*call_args), number=1, repeat=args.repeat))
            for b, fn in backends.items()
        }
        for b, t in times.items():
            speedup = times["numpy"] / t
            print(f"{name:<18}{b:<9}{1e3 * t:>10.3f}{speedup:>9.1f}x")
    if len(next(iter(impls.values()))) == 1:
        print("numba unavailable (or disabled via ASYNDBT_DISABLE_NUMBA); numpy only")


if __name__ == "__main__":
    main()
