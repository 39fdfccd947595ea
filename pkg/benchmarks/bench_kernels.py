"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first part calls both variants of each kernel directly. The second part
fits the boosted-tree baseline in two subprocesses, one of them with
``STGT_PURE_NUMPY=1``, so the end-to-end effect of the switch is visible.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stgt import accel, kernels

FIT_SNIPPET = """
import time, numpy as np
from stgt import accel
from stgt.trees import fit_gbt, predict_gbt
rng = np.random.default_rng(0)
X = rng.normal(size=(4000, 30)).round(2)
y = (X[:, 0] + X[:, 1] * X[:, 2] + rng.normal(size=4000) > 0.5).astype(int)
fit_gbt(X[:200], y[:200], n_estimators=2)          # compile outside the timing
t = time.perf_counter()
m = fit_gbt(X, y, n_estimators=50, seed=0)
predict_gbt(m, X)
print(accel.backend(), time.perf_counter() - t)
"""


def cases(rng):
    n = 20_000
    xs = np.sort(rng.normal(size=n).round(2))
    ys = (rng.random(n) < 0.1).astype(float)
    g, h = rng.normal(size=n), rng.random(n)
    from stgt.trees import fit_cart
    X = rng.normal(size=(20_000, 8))
    t = fit_cart(X, (X[:, 0] * X[:, 1] > 0).astype(float), max_depth=8, min_leaf=2)
    tree = (t.feature, t.threshold, t.left, t.right, t.value, X)
    pred = (rng.random(5000) < 0.3).astype(np.int64)
    lab = (rng.random(5000) < 0.05).astype(np.int64)
    idx = rng.integers(0, 5000, size=(200, 5000))
    return {
        "gini split scan": ("best_split_gini", (xs, ys, 5)),
        "newton split scan": ("best_split_newton", (xs, g, h, 1.0, 5)),
        "tree prediction": ("tree_predict", tree),
        "bootstrap confusion": ("bootstrap_confusion", (pred, lab, idx)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for label, (name, a) in cases(rng).items():
        f_np, f_nb = getattr(kernels, name + "_np"), getattr(kernels, name + "_nb")
        f_nb(*a)                                          # compile
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<22}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
    print("\nboosted trees, 4000 x 30, 50 rounds:")
    for flag in ("0", "1"):
        env = {**os.environ, "STGT_PURE_NUMPY": flag}
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]):8.2f} s")


if __name__ == "__main__":
    main()
