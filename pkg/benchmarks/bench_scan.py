"""Compare the compiled scan kernels against the numpy fallback.

    python3 benchmarks/bench_scan.py [--lengths 256,1024,4096] [--d-inner 64] [--state 16]

Times the fused selective-scan forward and backward passes of both backends
at each sequence length, plus the plain linear recurrence in its sequential
and log-step associative forms. Reports the best of ``--repeat`` runs and
checks the two backends agree before timing them.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from dimamba import _scan_ref, ssm
from dimamba.kernels import get_backend


def make_inputs(B, L, Di, N, seed=0):
    g = np.random.default_rng(seed)
    x = g.standard_normal((B, L, Di))
    delta = np.log1p(np.exp(g.standard_normal((B, L, Di)) - 2.0))
    A = -np.exp(g.standard_normal((Di, N)) * 0.5)
    Bm = g.standard_normal((B, L, N))
    Cm = g.standard_normal((B, L, N))
    D = g.standard_normal(Di)
    em1 = np.expm1(delta[..., None] * A)
    return x, delta, A, Bm, Cm, D, em1


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_selective(backends, B, L, Di, N, repeat):
    x, delta, A, Bm, Cm, D, em1 = make_inputs(B, L, Di, N)
    th = ssm.SERIES_THRESHOLD
    gy = np.random.default_rng(1).standard_normal((B, L, Di))
    row = {}
    ref_y = None
    for name, mod in backends.items():
        y, h = mod.scan_forward(x, delta, A, Bm, Cm, D, em1, th)
        if ref_y is None:
            ref_y = y
        elif np.max(np.abs(y - ref_y)) > 1e-9:
            raise SystemExit(f"backend {name} disagrees with the reference")
        fwd = best(lambda: mod.scan_forward(x, delta, A, Bm, Cm, D, em1, th), repeat)
        bwd = best(lambda: mod.scan_backward(x, delta, A, Bm, Cm, D, em1, h, gy, th), repeat)
        row[name] = (fwd, bwd)
    return row


def bench_linear(L, width, repeat):
    g = np.random.default_rng(2)
    a = g.uniform(0.5, 1.0, (1, L, width))
    u = g.standard_normal((1, L, width))
    seq = best(lambda: _scan_ref.linear_scan(a, u), repeat)
    assoc = best(lambda: _scan_ref.linear_scan_associative(a, u), repeat)
    return seq, assoc


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", default="256,1024,4096")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--d-inner", type=int, default=64)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    lengths = [int(v) for v in args.lengths.split(",")]

    backends = {"python": get_backend("python")}
    try:
        backends["cython"] = get_backend("cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)

    print(f"selective scan, batch {args.batch}, D_inner {args.d_inner}, N {args.state} (ms, best of {args.repeat})")
    print(f"{'L':>6} " + " ".join(f"{n + ' fwd':>12} {n + ' bwd':>12}" for n in backends)
          + ("   speedup fwd/bwd" if len(backends) == 2 else ""))
    for L in lengths:
        row = bench_selective(backends, args.batch, L, args.d_inner, args.state, args.repeat)
        cells = " ".join(f"{f * 1e3:12.2f} {b * 1e3:12.2f}" for f, b in row.values())
        extra = ""
        if len(row) == 2:
            (pf, pb), (cf, cb) = row["python"], row["cython"]
            extra = f"   {pf / cf:6.1f}x / {pb / cb:5.1f}x"
        print(f"{L:>6} {cells}{extra}")

    width = args.d_inner * args.state
    print(f"\nlinear recurrence, width {width} (ms): sequential vs associative doubling")
    for L in lengths:
        seq, assoc = bench_linear(L, width, args.repeat)
        print(f"{L:>6} {seq * 1e3:12.2f} {assoc * 1e3:12.2f}")


if __name__ == "__main__":
    main()
