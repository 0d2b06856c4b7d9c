"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 200] [--csv out.csv]

Both versions of every kernel are timed on the shapes the training loop and
the surrogate actually use (64 blocks, 6-dim state, 256 hidden units, batch
64). The first numba call compiles, so each kernel is warmed up first.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from elasticprune import kernels
from elasticprune._accel import HAVE_NUMBA


def cases(rng, hidden=256, n_actions=64, batch=64):
    W1 = rng.normal(size=(6, hidden))
    b1 = rng.normal(size=hidden)
    W2 = rng.normal(size=(hidden, n_actions))
    b2 = rng.normal(size=n_actions)
    S = rng.normal(size=(batch, 6))
    A = rng.integers(0, n_actions, batch)
    Y = rng.normal(size=batch)
    legal = rng.random((batch, n_actions)) < 0.6
    legal[:, 0] = True
    unary = rng.random(64)
    pa = np.arange(0, 62, 2)
    pb = pa + 1
    pc = rng.random(pa.size)
    pruned = rng.random(64) < 0.4
    g = rng.normal(size=W2.shape)
    m = np.zeros_like(g)
    v = np.zeros_like(g)
    p = W2.copy()
    return {
        "surrogate_log_ppl": (1.0, unary, pa, pb, pc, pruned),
        "mlp_forward[1]": (W1, b1, W2, b2, S[:1]),
        "mlp_forward[64]": (W1, b1, W2, b2, S),
        "td_loss_grads": (W1, b1, W2, b2, S, A, Y),
        "masked_row_max": (np.abs(S @ W1) @ W2, legal),
        "masked_argmax": (W2[0], legal[0]),
        "adam_update": (p, g, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rows = []
    for name, call_args in cases(np.random.default_rng(0)).items():
        base = name.split("[")[0]
        f_np = getattr(kernels, base + "_np")
        f_nb = getattr(kernels, base + "_nb")
        f_nb(*call_args)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*call_args), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), number=args.repeat, repeat=3)) / args.repeat
        rows.append({"kernel": name, "numpy_us": 1e6 * t_np, "numba_us": 1e6 * t_nb, "speedup": t_np / t_nb})

    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numpy_us']:>12.2f}{r['numba_us']:>12.2f}{r['speedup']:>9.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
