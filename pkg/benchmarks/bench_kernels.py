"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

JIT compilation is triggered once before timing so it does not count.
"""

import argparse
from timeit import default_timer as timer

import numpy as np

from brainalign import _kernels as K


def best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = timer()
        out = fn(*args)
        best = min(best, timer() - t0)
    return best, out


def cases(scale, rng):
    n_bytes = int(2_000_000 * scale)
    blob = rng.integers(0, 256, n_bytes).astype(np.uint8)

    la = int(400 * scale) + 2
    a = rng.integers(0, 50, la).astype(np.int64)
    b = rng.integers(0, 50, la).astype(np.int64)

    n_box = int(200_000 * scale)
    lo = rng.random((n_box, 2)) * 0.5
    boxes_a = np.hstack([lo, lo + 0.1 + rng.random((n_box, 2)) * 0.4])
    lo = rng.random((n_box, 2)) * 0.5
    boxes_b = np.hstack([lo, lo + 0.1 + rng.random((n_box, 2)) * 0.4])

    n = int(1000 * scale) + 2
    sim = rng.standard_normal((n, n))
    keys = rng.random((n, n - 1))
    pick = np.argpartition(keys, 298, axis=1)[:, :299] if n > 300 else np.tile(np.arange(n - 1), (n, 1))
    pools = pick + (pick >= np.arange(n)[:, None])
    probes = np.arange(n, dtype=np.int64)

    return [
        ("fnv1a64", f"{n_bytes} bytes", K.fnv1a64_np, K.fnv1a64_nb if K.HAVE_NUMBA else None, (blob,)),
        ("lcs_length", f"{la}x{la} tokens", K.lcs_length_np, K.lcs_length_nb if K.HAVE_NUMBA else None, (a, b)),
        ("paired_iou", f"{n_box} pairs", K.paired_iou_np, K.paired_iou_nb if K.HAVE_NUMBA else None,
         (boxes_a, boxes_b)),
        ("pool_top1_hits", f"{n} probes x {pools.shape[1]}", K.pool_top1_hits_np,
         K.pool_top1_hits_nb if K.HAVE_NUMBA else None, (sim, probes, np.ascontiguousarray(pools))),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<16}{'size':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  match")
    for name, size, f_np, f_nb, inputs in cases(args.scale, rng):
        t_np, r_np = best_of(f_np, inputs, args.repeat)
        if f_nb is None:
            print(f"{name:<16}{size:<24}{t_np * 1e3:>12.2f}{'-':>12}{'-':>10}  -")
            continue
        f_nb(*inputs)  # compile
        t_nb, r_nb = best_of(f_nb, inputs, args.repeat)
        match = np.array_equal(np.asarray(r_np), np.asarray(r_nb))
        print(f"{name:<16}{size:<24}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {match}")


if __name__ == "__main__":
    main()
