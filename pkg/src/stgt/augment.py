"""Three-stage minority augmentation for training folds.

Stage 1 adds one Gaussian-jittered copy per positive row, stage 2 fills the
remainder with SMOTE interpolations between original positives, and the total
stops as soon as positives make up ``target_ratio`` of the rows. Only
continuous columns are perturbed or interpolated; one-hot and flag columns are
copied from the source row (stage 1) or from the nearer parent (stage 2).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError, LeakageError, ValidationError

log = logging.getLogger(__name__)

ORIGINAL, REPLICA, SMOTE = 0, 1, 2


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.05
    smote_k: int = 5
    target_ratio: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_ratio < 1:
            raise ValidationError("target_ratio must lie in (0, 1)")
        if self.smote_k < 1:
            raise ValidationError("smote_k must be at least 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


@dataclass
class Augmented:
    X: np.ndarray
    y: np.ndarray
    synthetic: np.ndarray     # True for generated rows
    source: np.ndarray        # input row each output row inherits its context from
    stage: np.ndarray         # ORIGINAL / REPLICA / SMOTE
    summary: dict = field(default_factory=dict)


def _continuous(continuous, n_cols):
    if continuous is None:
        return np.ones(n_cols, dtype=bool)
    continuous = np.asarray(continuous, dtype=bool)
    if continuous.shape != (n_cols,):
        raise ValidationError(f"continuous mask has shape {continuous.shape}, expected ({n_cols},)")
    return continuous


def replicate_with_noise(rows, sigma: float, rng, continuous=None) -> np.ndarray:
    """One copy of each row with N(0, sigma^2) noise on the continuous columns."""
    rows = np.asarray(rows, dtype=np.float64)
    cont = _continuous(continuous, rows.shape[1])
    out = rows.copy()
    noise = rng.normal(0.0, sigma, size=(rows.shape[0], int(cont.sum())))
    out[:, cont] += noise
    return out


def nearest_neighbors(X, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows (Euclidean), closest first; ties by index."""
    d = cdist(X, X, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def smote(positives, k: int, n_needed: int, rng, continuous=None, sigma: float = 0.05):
    """SMOTE samples ``p + u (q - p)`` with ``q`` among the ``k`` nearest positives of ``p``.

    Returns ``(rows, base, neighbor, nearer)`` where the last three index into
    ``positives``; ``nearer`` is the parent the discrete columns were copied from.
    """
    P = np.asarray(positives, dtype=np.float64)
    n, F = P.shape
    cont = _continuous(continuous, F)
    empty = np.empty(0, dtype=np.int64)
    if n_needed <= 0:
        return np.empty((0, F)), empty, empty, empty
    if n == 0:
        raise ContractError("SMOTE needs at least one positive row")
    if n == 1:
        warnings.warn("SMOTE with a single positive; falling back to noisy replication", stacklevel=2)
        base = np.zeros(n_needed, dtype=np.int64)
        rows = replicate_with_noise(P[base], sigma, rng, cont)
        return rows, base, base, base
    k = min(k, n - 1)
    nbrs = nearest_neighbors(P, k)
    base = rng.integers(0, n, size=n_needed)
    nbr = nbrs[base, rng.integers(0, k, size=n_needed)]
    u = rng.random(n_needed)
    nearer = np.where(u < 0.5, base, nbr)
    rows = P[nearer].copy()
    rows[:, cont] = P[base][:, cont] + u[:, None] * (P[nbr][:, cont] - P[base][:, cont])
    return rows, base, nbr, nearer


def required_positives(n_neg: int, ratio: float) -> int:
    """Smallest positive count ``p`` with ``p / (p + n_neg) >= ratio``."""
    p = int(np.ceil(ratio * n_neg / (1.0 - ratio)))
    while p > 0 and (p - 1) / (p - 1 + n_neg) >= ratio:
        p -= 1
    while p / (p + n_neg) < ratio:
        p += 1
    return p


def balance_to_ratio(X, y, config: AugmentConfig = AugmentConfig(), continuous=None,
                     tags=None) -> Augmented:
    """Augment a training partition until positives reach ``config.target_ratio``.

    ``tags`` optionally names the partition of every row; anything other than
    ``"train"`` is refused. Original rows come first, unchanged and in order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    n, F = X.shape
    if tags is not None:
        bad = sorted({str(t) for t in np.asarray(tags).ravel()} - {"train"})
        if bad:
            raise LeakageError(f"augmentation is restricted to training rows; got rows tagged {bad}")
    cont = _continuous(continuous, F)
    pos = np.flatnonzero(y == 1)
    n_pos, n_neg = pos.size, n - pos.size
    summary = {"original_rows": n, "original_positives": int(n_pos), "replicated": 0, "smote": 0}
    ident = Augmented(X.copy(), y.copy(), np.zeros(n, dtype=bool), np.arange(n),
                      np.zeros(n, dtype=np.int64), summary)
    if n_pos == 0:
        raise ContractError("augmentation needs at least one positive row")
    need = required_positives(n_neg, config.target_ratio) - n_pos
    if need <= 0:
        summary.update(final_rows=n, final_positive_fraction=n_pos / n)
        return ident
    rng = np.random.default_rng(config.seed)

    n_rep = min(n_pos, need)
    rep_src = pos if n_rep == n_pos else np.sort(rng.choice(pos, size=n_rep, replace=False))
    rep_rows = replicate_with_noise(X[rep_src], config.noise_sigma, rng, cont)

    n_smote = need - n_rep
    sm_rows, _, _, nearer = smote(X[pos], config.smote_k, n_smote, rng, cont, config.noise_sigma)
    sm_src = pos[nearer]

    X_out = np.vstack([X, rep_rows, sm_rows])
    y_out = np.concatenate([y, np.ones(n_rep + n_smote, dtype=np.int64)])
    synthetic = np.concatenate([np.zeros(n, dtype=bool), np.ones(n_rep + n_smote, dtype=bool)])
    source = np.concatenate([np.arange(n), rep_src, sm_src]).astype(np.int64)
    stage = np.concatenate([np.full(n, ORIGINAL), np.full(n_rep, REPLICA), np.full(n_smote, SMOTE)])
    summary.update(replicated=int(n_rep), smote=int(n_smote), final_rows=int(X_out.shape[0]),
                   final_positive_fraction=float(y_out.mean()))
    log.info("augmentation: %s", summary)
    return Augmented(X_out, y_out, synthetic, source, stage, summary)
