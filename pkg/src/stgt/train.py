"""Temporal splits, the optimisation loop, threshold choice and metrics."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import kernels
from .dataset import RowSet, assemble_batch, build_units, pack_units, unit_weights
from .errors import ConfigError, LeakageError, NumericError, ValidationError
from .model import LossConfig, ModelConfig, ModelParams, focal_loss, forward

log = logging.getLogger(__name__)

METRICS = ("accuracy", "precision", "recall", "f1", "mae")


# --- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_years: tuple
    val_years: tuple
    test_years: tuple
    holdout: tuple = ()

    def __post_init__(self):
        for name in ("train_years", "val_years", "test_years"):
            object.__setattr__(self, name, tuple(int(y) for y in getattr(self, name)))
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        object.__setattr__(self, "holdout", tuple(self.holdout))
        if not max(self.train_years) < min(self.val_years) <= max(self.val_years) < min(self.test_years):
            raise ConfigError("split years must be ordered train < validation < test")


def temporal_split(label_dates, spec: SplitSpec, substations=None) -> dict:
    """Partition samples by the year of their label day.

    Returns ``{"train", "val", "test"}`` index arrays. Samples of held-out
    substations are removed from train and validation; when any are held out,
    the test partition keeps only them.
    """
    years = np.asarray(label_dates, dtype="datetime64[Y]").astype(np.int64) + 1970
    parts = {}
    for name, ys in (("train", spec.train_years), ("val", spec.val_years), ("test", spec.test_years)):
        parts[name] = np.isin(years, ys)
    if spec.holdout:
        if substations is None:
            raise ConfigError("a spatial holdout needs substation ids per sample")
        held = np.isin(np.asarray(substations), spec.holdout)
        parts["train"] &= ~held
        parts["val"] &= ~held
        parts["test"] &= held
    out = {k: np.flatnonzero(v) for k, v in parts.items()}
    for k, v in out.items():
        if v.size == 0:
            raise ConfigError(f"{k} partition is empty for split {spec}")
    return out


def cv_folds(label_dates, k: int = 5):
    """Forward-chaining folds over ``k + 1`` contiguous blocks of label dates.

    Fold ``i`` fits on blocks ``0..i`` and holds out block ``i + 1``. Blocks
    split the sorted distinct dates as evenly as possible, so no date straddles
    two blocks.
    """
    dates = np.asarray(label_dates, dtype="datetime64[D]")
    uniq = np.unique(dates)
    if uniq.size < k + 1:
        raise ConfigError(f"{uniq.size} distinct label dates cannot form {k + 1} blocks")
    months = np.unique(uniq.astype("datetime64[M]"))
    if months.size < k + 1:
        raise ConfigError(f"need at least {k + 1} distinct months of data for {k} folds, got {months.size}")
    edges = np.linspace(0, uniq.size, k + 2).round().astype(int)
    block_of_date = np.searchsorted(edges, np.arange(uniq.size), side="right") - 1
    block = block_of_date[np.searchsorted(uniq, dates)]
    return [(np.flatnonzero(block <= i), np.flatnonzero(block == i + 1)) for i in range(k)]


def assert_no_leakage(pairs):
    """``pairs`` is an iterable of ``(name, fit_dates, eval_dates)``; raises on overlap."""
    for name, fit, ev in pairs:
        fit = np.asarray(fit, dtype="datetime64[D]")
        ev = np.asarray(ev, dtype="datetime64[D]")
        if fit.size and ev.size and not fit.max() < ev.min():
            raise LeakageError(f"{name}: latest fit label {fit.max()} is not before earliest eval label {ev.min()}")


# --- optimisation -----------------------------------------------------------

class Adam:
    """Adaptive-moment updates; ``weight_decay`` is applied decoupled from the moments."""

    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                step = step + self.weight_decay * p.data
            p.data = p.data - self.lr * step


def clip_grad_norm(grads: dict, max_norm: float):
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 20
    grad_clip_norm: float = 1.0
    lr: float = 1e-3
    seed: int = 0
    weighted_sampling: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def loss_and_grads(params: ModelParams, batch, cfg: ModelConfig, loss_cfg: LossConfig):
    with ad.Tape() as tape:
        p = forward(params, batch, cfg)
        loss = focal_loss(p, batch.labels, loss_cfg)
        tape.backward(loss)
        grads = {k: v.grad for k, v in params.items()}
    return float(loss.data[0, 0]), grads, p.data.ravel()


def predict_rows(params: ModelParams, rows: RowSet, cfg: ModelConfig, adjacency, max_targets: int = 2048):
    """Probabilities for every scored row of ``rows`` (order of ``np.flatnonzero(rows.target)``)."""
    units = build_units(rows)
    out = np.full(len(rows), np.nan)
    for chunk in pack_units(units, range(len(units)), max_targets):
        us = [units[u] for u in chunk]
        batch = assemble_batch(rows, us, adjacency)
        p = forward(params, batch, cfg).data.ravel()
        order = _target_rows(rows, us)
        out[order] = p
    return out[rows.target]


def _target_rows(rows: RowSet, units):
    """Row ids in the order :func:`assemble_batch` emits targets."""
    ids = []
    for u in units:
        ids.extend(r for r in u.real.tolist() if rows.target[r])
        for ph in u.phantoms.tolist():
            ids.append(ph)
    return np.asarray(ids, dtype=np.int64)


def mean_focal_loss(params, rows: RowSet, cfg, loss_cfg, adjacency) -> float:
    p = predict_rows(params, rows, cfg, adjacency)
    return float(focal_loss(p.reshape(-1, 1), rows.label[rows.target], loss_cfg).data[0, 0])


def train_loop(params: ModelParams, fit_rows: RowSet, val_rows: RowSet | None, adjacency,
               cfg: ModelConfig, loss_cfg: LossConfig, tcfg: TrainConfig, callback=None):
    """Mini-batch Adam over day units with clipping and early stopping.

    Units are drawn with replacement, weighted by the inverse class frequency
    of their scored rows, once per unit per epoch on average. After training
    the parameters of the epoch with the lowest validation loss are restored.
    """
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    units = build_units(fit_rows)
    if not units:
        raise ValidationError("no training units")
    w = unit_weights(fit_rows, units)
    prob = w / w.sum() if tcfg.weighted_sampling and w.sum() > 0 else None
    hist = History()
    best, best_state, bad = np.inf, params.copy_arrays(), 0
    for epoch in range(tcfg.max_epochs):
        if prob is not None:
            order = rng.choice(len(units), size=len(units), replace=True, p=prob)
        else:
            order = rng.permutation(len(units))
        losses = []
        for chunk in pack_units(units, order, tcfg.batch_size):
            batch = assemble_batch(fit_rows, [units[u] for u in chunk], adjacency)
            loss, grads, p = loss_and_grads(params, batch, cfg, loss_cfg)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}: batch of {batch.targets.size} targets, "
                    f"{int(batch.labels.sum())} positive, prob range [{np.nanmin(p):.3g}, {np.nanmax(p):.3g}]")
            grads, _ = clip_grad_norm(grads, tcfg.grad_clip_norm)
            opt.step(grads)
            losses.append(loss)
        hist.train_loss.append(float(np.mean(losses)))
        if val_rows is not None and len(val_rows):
            vl = mean_focal_loss(params, val_rows, cfg, loss_cfg, adjacency)
        else:
            vl = hist.train_loss[-1]
        hist.val_loss.append(vl)
        if callback is not None:
            callback(epoch, hist)
        log.debug("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], vl)
        if vl < best:
            best, best_state, bad, hist.best_epoch = vl, params.copy_arrays(), 0, epoch
        else:
            bad += 1
            if bad >= tcfg.patience:
                hist.stopped_early = True
                break
    params.load_arrays(best_state)
    return params, hist


# --- threshold and metrics --------------------------------------------------

THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


def f_beta(tp, fp, fn, beta=2.0):
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    b2 = beta * beta
    den = (1 + b2) * tp + b2 * fn + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (1 + b2) * tp / den, 0.0)


def select_threshold(probs, labels, beta: float = 2.0) -> float:
    """Threshold in 0.01..0.99 maximising F-beta on ``labels``; ties go to the lowest."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        warnings.warn("single-class validation labels; using threshold 0.5", stacklevel=2)
        return 0.5
    pred = probs[None, :] >= THRESHOLDS[:, None]
    tp = (pred & labels).sum(axis=1)
    fp = (pred & ~labels).sum(axis=1)
    fn = (~pred & labels).sum(axis=1)
    scores = f_beta(tp, fp, fn, beta)
    return float(THRESHOLDS[int(np.argmax(scores))])


def _rates(conf):
    """Accuracy, precision, recall and F1 from ``(..., 4)`` confusion counts."""
    conf = np.asarray(conf, dtype=np.float64)
    tp, fp, fn, tn = conf[..., 0], conf[..., 1], conf[..., 2], conf[..., 3]
    n = tp + fp + fn + tn
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = (tp + tn) / n
        prec = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return acc, prec, rec, f1


@dataclass
class MetricsReport:
    values: dict
    ci: dict
    confusion: dict
    threshold: float
    n: int
    boot_iters: int

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self, model: str, feature_set: str, fold: str = "test"):
        return [{"model": model, "feature_set": feature_set, "fold": fold, "metric": m,
                 "value": self.values[m], "ci_lo": self.ci[m][0], "ci_hi": self.ci[m][1]}
                for m in METRICS]


def evaluate(probs, labels, threshold: float, boot_iters: int = 1000, seed: int = 0,
             synthetic=None) -> MetricsReport:
    """Point metrics at ``threshold`` with percentile-bootstrap 95% intervals.

    Rows flagged as synthetic are refused. Intervals are widened, if needed,
    to contain the point estimate.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if synthetic is not None and np.any(synthetic):
        raise LeakageError(f"evaluation received {int(np.sum(synthetic))} augmented row(s)")
    if probs.size == 0 or probs.shape != labels.shape:
        raise ValidationError("evaluate needs equally sized, non-empty probabilities and labels")
    pred = (probs >= threshold).astype(np.int64)
    n = probs.size
    conf = kernels.bootstrap_confusion(pred, labels, np.arange(n, dtype=np.int64)[None, :])[0]
    acc, prec, rec, f1 = (float(x) for x in _rates(conf))
    abs_err = np.abs(probs - labels)
    values = {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1, "mae": float(abs_err.mean())}
    rng = np.random.default_rng(seed)
    boot = {m: np.empty(boot_iters) for m in METRICS}
    step = max(1, 2_000_000 // n)
    for lo in range(0, boot_iters, step):
        b = min(step, boot_iters - lo)
        idx = rng.integers(0, n, size=(b, n))
        c = kernels.bootstrap_confusion(pred, labels, idx)
        a, p, r, f = _rates(c)
        sl = slice(lo, lo + b)
        boot["accuracy"][sl], boot["precision"][sl], boot["recall"][sl], boot["f1"][sl] = a, p, r, f
        boot["mae"][sl] = abs_err[idx].mean(axis=1)
    ci = {}
    for m in METRICS:
        if boot_iters:
            lo_, hi_ = np.percentile(boot[m], [2.5, 97.5])
        else:
            lo_ = hi_ = values[m]
        ci[m] = [float(min(lo_, values[m])), float(max(hi_, values[m]))]
    confusion = dict(zip(("tp", "fp", "fn", "tn"), (int(x) for x in conf)))
    return MetricsReport(values, ci, confusion, float(threshold), int(n), int(boot_iters))


def write_metrics_json(path, reports: dict, extra=None):
    payload = {"reports": {k: v.to_dict() for k, v in reports.items()}}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "feature_set", "fold", "metric", "value", "ci_lo", "ci_hi"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"])), "ci_lo": repr(float(r["ci_lo"])),
                        "ci_hi": repr(float(r["ci_hi"]))})


def date_of(start: dt.date, day) -> np.ndarray:
    return np.datetime64(start, "D") + np.asarray(day)
