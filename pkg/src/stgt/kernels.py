"""Inner loops of tree fitting, tree inference and bootstrap resampling.

Every kernel exists twice: ``*_nb`` is an explicit loop compiled by numba and
``*_np`` is the vectorised numpy equivalent. The public name is bound to one of
them at import time according to :data:`stgt.accel.USE_NUMBA`. Split scans use
sequential prefix sums in both versions, so the two backends return
bit-identical splits.
"""
import numpy as np

from .accel import USE_NUMBA, njit

# Minimum gain for a split to count; filters round-off "improvements" on pure nodes.
MIN_GAIN = 1e-12


# --- Gini split scan --------------------------------------------------------

def best_split_gini_np(xs, ys, min_leaf):
    """Best Gini split of one feature.

    ``xs`` must be sorted ascending and ``ys`` (0/1 floats) aligned with it.
    Returns ``(gain, i)``: the weighted impurity decrease and the position such
    that rows ``0..i`` go left. ``i == -1`` when no admissible split exists.
    """
    n = xs.shape[0]
    if n < 2:
        return 0.0, -1
    cs = np.cumsum(ys)
    total = cs[-1]
    pl = cs[:-1]
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    pr = total - pl
    parent = 2.0 * total * (n - total) / n
    gain = parent - 2.0 * pl * (nl - pl) / nl - 2.0 * pr * (nr - pr) / nr
    ok = (nl >= min_leaf) & (nr >= min_leaf) & (xs[:-1] < xs[1:])
    if not ok.any():
        return 0.0, -1
    gain = np.where(ok, gain, -np.inf)
    i = int(np.argmax(gain))
    if gain[i] <= MIN_GAIN:
        return 0.0, -1
    return float(gain[i]), i


@njit
def best_split_gini_nb(xs, ys, min_leaf):
    n = xs.shape[0]
    if n < 2:
        return 0.0, -1
    total = 0.0
    for i in range(n):
        total += ys[i]
    parent = 2.0 * total * (n - total) / n
    best = -np.inf
    best_i = -1
    pl = 0.0
    for i in range(n - 1):
        pl += ys[i]
        nl = float(i + 1)
        nr = n - nl
        if nl < min_leaf or nr < min_leaf or not xs[i] < xs[i + 1]:
            continue
        pr = total - pl
        gain = parent - 2.0 * pl * (nl - pl) / nl - 2.0 * pr * (nr - pr) / nr
        if gain > best:
            best = gain
            best_i = i
    if best_i < 0 or best <= MIN_GAIN:
        return 0.0, -1
    return best, best_i


# --- second-order (gradient/hessian) split scan -----------------------------

def best_split_newton_np(xs, g, h, lam, min_leaf):
    """Best split for boosting: maximises the second-order loss reduction.

    Same conventions as :func:`best_split_gini_np`; ``g``/``h`` are per-row
    gradients and hessians aligned with the sorted ``xs``.
    """
    n = xs.shape[0]
    if n < 2:
        return 0.0, -1
    cg = np.cumsum(g)
    ch = np.cumsum(h)
    gt, ht = cg[-1], ch[-1]
    gl, hl = cg[:-1], ch[:-1]
    gr, hr = gt - gl, ht - hl
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (ht + lam))
    ok = (nl >= min_leaf) & (nr >= min_leaf) & (xs[:-1] < xs[1:])
    if not ok.any():
        return 0.0, -1
    gain = np.where(ok, gain, -np.inf)
    i = int(np.argmax(gain))
    if gain[i] <= MIN_GAIN:
        return 0.0, -1
    return float(gain[i]), i


@njit
def best_split_newton_nb(xs, g, h, lam, min_leaf):
    n = xs.shape[0]
    if n < 2:
        return 0.0, -1
    gt = 0.0
    ht = 0.0
    for i in range(n):
        gt += g[i]
        ht += h[i]
    best = -np.inf
    best_i = -1
    gl = 0.0
    hl = 0.0
    for i in range(n - 1):
        gl += g[i]
        hl += h[i]
        nl = float(i + 1)
        nr = n - nl
        if nl < min_leaf or nr < min_leaf or not xs[i] < xs[i + 1]:
            continue
        gr = gt - gl
        hr = ht - hl
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (ht + lam))
        if gain > best:
            best = gain
            best_i = i
    if best_i < 0 or best <= MIN_GAIN:
        return 0.0, -1
    return best, best_i


# --- tree inference ---------------------------------------------------------

def tree_predict_np(feature, threshold, left, right, value, X):
    """Route every row of ``X`` to a leaf; ``feature < 0`` marks leaves."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    while True:
        f = feature[node]
        active = f >= 0
        if not active.any():
            break
        r = rows[active]
        nd = node[active]
        go_left = X[r, f[active]] <= threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
    return value[node]


@njit
def tree_predict_nb(feature, threshold, left, right, value, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


# --- bootstrap confusion counts ---------------------------------------------

def bootstrap_confusion_np(pred, label, idx):
    """Confusion counts ``(tp, fp, fn, tn)`` for each resample row of ``idx``."""
    p = pred[idx].astype(bool)
    t = label[idx].astype(bool)
    out = np.empty((idx.shape[0], 4), dtype=np.int64)
    out[:, 0] = (p & t).sum(axis=1)
    out[:, 1] = (p & ~t).sum(axis=1)
    out[:, 2] = (~p & t).sum(axis=1)
    out[:, 3] = (~p & ~t).sum(axis=1)
    return out


@njit
def bootstrap_confusion_nb(pred, label, idx):
    b, n = idx.shape
    out = np.zeros((b, 4), dtype=np.int64)
    for r in range(b):
        for j in range(n):
            k = idx[r, j]
            if pred[k]:
                if label[k]:
                    out[r, 0] += 1
                else:
                    out[r, 1] += 1
            elif label[k]:
                out[r, 2] += 1
            else:
                out[r, 3] += 1
    return out


if USE_NUMBA:
    best_split_gini = best_split_gini_nb
    best_split_newton = best_split_newton_nb
    tree_predict = tree_predict_nb
    bootstrap_confusion = bootstrap_confusion_nb
else:
    best_split_gini = best_split_gini_np
    best_split_newton = best_split_newton_np
    tree_predict = tree_predict_np
    bootstrap_confusion = bootstrap_confusion_np
