"""CART trees, random forests and second-order gradient boosting.

Trees are stored as flat arrays so inference can run in a compiled kernel.
``feature[i] < 0`` marks node ``i`` as a leaf; otherwise rows with
``x[feature] <= threshold`` go to ``left[i]`` and the rest to ``right[i]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

LAMBDA = 1.0


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got array of shape {X.shape}")
        return kernels.tree_predict(self.feature, self.threshold, self.left, self.right, self.value, X)

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            n_features=int(d["n_features"]),
        )


def _threshold(lo, hi):
    t = lo + (hi - lo) / 2.0
    return lo if t >= hi else t


def fit_cart(X, y=None, *, grad=None, hess=None, max_depth=None, min_leaf=5,
             max_features=None, lam=LAMBDA, seed=None, importance=None) -> Tree:
    """Greedy CART.

    Classification when ``y`` is given (Gini splits, leaf value = positive
    fraction); regression on boosting statistics when ``grad``/``hess`` are
    given (leaf value ``-sum(g) / (sum(h) + lam)``). ``max_features`` is the
    number of features drawn per split (``"sqrt"`` allowed). Weighted impurity
    decreases are added into ``importance`` when an array is passed.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("fit_cart needs a non-empty 2-D design matrix")
    n, F = X.shape
    classify = y is not None
    if classify:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (n,):
            raise ShapeError(f"labels shape {y.shape} does not match {n} rows")
    elif grad is None or hess is None:
        raise ContractError("fit_cart needs labels or gradient/hessian statistics")
    else:
        grad = np.asarray(grad, dtype=np.float64)
        hess = np.asarray(hess, dtype=np.float64)
    if max_features == "sqrt":
        max_features = max(1, int(np.sqrt(F)))
    k = F if max_features is None else min(int(max_features), F)
    max_depth = np.iinfo(np.int64).max if max_depth is None else int(max_depth)
    rng = np.random.default_rng(seed)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        if classify:
            value.append(float(y[rows].mean()))
        else:
            value.append(float(-grad[rows].sum() / (hess[rows].sum() + lam)))
        return len(feature) - 1

    root = new_node(np.arange(n))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, rows, depth = stack.pop()
        m = rows.shape[0]
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        if classify:
            yr = y[rows]
            if yr.min() == yr.max():
                continue
        feats = np.arange(F) if k == F else np.sort(rng.choice(F, size=k, replace=False))
        best_gain, best_f, best_t = 0.0, -1, 0.0
        for f in feats:
            col = X[rows, f]
            order = np.argsort(col, kind="stable")
            xs = col[order]
            if classify:
                gain, i = kernels.best_split_gini(xs, yr[order], min_leaf)
            else:
                gain, i = kernels.best_split_newton(xs, grad[rows][order], hess[rows][order], lam, min_leaf)
            if i >= 0 and gain > best_gain:
                best_gain, best_f, best_t = gain, int(f), _threshold(xs[i], xs[i + 1])
        if best_f < 0:
            continue
        go_left = X[rows, best_f] <= best_t
        lrows, rrows = rows[go_left], rows[~go_left]
        if importance is not None:
            importance[best_f] += best_gain
        feature[node], threshold[node] = best_f, best_t
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # depth-first, left subtree first
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        n_features=F,
    )


def _check_binary(y):
    y = np.asarray(y)
    classes = np.unique(y)
    if not np.isin(classes, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    if classes.size < 2:
        raise ContractError("both classes must be present")
    return y.astype(np.float64)


# --- random forest ----------------------------------------------------------

@dataclass
class RandomForest:
    trees: list
    importance: np.ndarray
    n_features: int

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_random_forest(X, y, n_trees: int = 100, *, max_depth=None, min_leaf: int = 1,
                      max_features="sqrt", seed: int = 0) -> RandomForest:
    """Bootstrap-aggregated Gini trees; importance is the normalised impurity decrease."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = _check_binary(y)
    n, F = X.shape
    rng = np.random.default_rng(seed)
    imp = np.zeros(F)
    trees = []
    for _ in range(n_trees):
        rows = rng.integers(0, n, size=n)
        trees.append(fit_cart(X[rows], y[rows], max_depth=max_depth, min_leaf=min_leaf,
                              max_features=max_features, seed=rng.integers(2**32), importance=imp))
    total = imp.sum()
    if total > 0:
        imp = imp / total
    return RandomForest(trees, imp, F)


# --- gradient boosting ------------------------------------------------------

def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(y, margin, weight=None) -> float:
    # log(1 + exp(-m)) for y=1 and log(1 + exp(m)) for y=0, computed stably
    z = np.where(y > 0, -margin, margin)
    per = np.logaddexp(0.0, z)
    if weight is not None:
        return float((weight * per).sum() / weight.sum())
    return float(per.mean())


@dataclass
class GbtModel:
    base_score: float
    trees: list
    learning_rate: float
    n_features: int
    loss_trace: list = field(default_factory=list)

    def margin(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"model was trained on {self.n_features} features, got shape {X.shape}")
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "loss_trace": self.loss_trace,
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text) -> "GbtModel":
        d = json.loads(text)
        return cls(d["base_score"], [Tree.from_dict(t) for t in d["trees"]],
                   d["learning_rate"], d["n_features"], d.get("loss_trace", []))


def predict_gbt(model: GbtModel, X) -> np.ndarray:
    return _sigmoid(model.margin(X))


def fit_gbt(X, y, *, max_depth: int = 6, learning_rate: float = 0.1, n_estimators: int = 100,
            subsample: float = 0.8, class_weight: float | None = None, min_leaf: int = 1,
            lam: float = LAMBDA, seed: int = 0) -> GbtModel:
    """Logistic-loss boosting with Newton leaves.

    ``class_weight`` multiplies the gradient and hessian of positive rows;
    pass ``(1 - r) / r`` for inverse-frequency weighting. Each tree is grown on
    a ``subsample`` fraction of rows drawn without replacement.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = _check_binary(y)
    n, F = X.shape
    rng = np.random.default_rng(seed)
    rate = y.mean()
    base = float(np.log(rate / (1.0 - rate)))
    w = np.where(y > 0, 1.0 if class_weight is None else float(class_weight), 1.0)
    margin = np.full(n, base)
    model = GbtModel(base, [], float(learning_rate), F)
    model.loss_trace.append(logistic_loss(y, margin, w))
    n_sub = max(1, int(round(subsample * n)))
    for _ in range(n_estimators):
        p = _sigmoid(margin)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        rows = np.sort(rng.choice(n, size=n_sub, replace=False)) if n_sub < n else np.arange(n)
        tree = fit_cart(X[rows], grad=g[rows], hess=h[rows], max_depth=max_depth,
                        min_leaf=min_leaf, lam=lam)
        model.trees.append(tree)
        margin = margin + learning_rate * tree.predict(X)
        model.loss_trace.append(logistic_loss(y, margin, w))
    return model
