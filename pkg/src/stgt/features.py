"""Per-day temporal encodings, static substation vectors, scalers and
bootstrap random-forest feature selection."""
from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, StateError, ValidationError
from .graph import TOPO_NAMES, TopoFeatures
from .ingest import DailySeries, SiteTable
from .synth import VOLTAGE_CLASSES
from .trees import fit_random_forest

DAYS_PER_YEAR = 365.25

TEMPORAL_NAMES = (
    ("log_count", "doy_sin", "doy_cos")
    + tuple(f"weekday_{i}" for i in range(7))
    + tuple(f"month_{i + 1}" for i in range(12))
    + ("time_counter", "weekend")
)
N_TEMPORAL = len(TEMPORAL_NAMES)
TEMPORAL_CONTINUOUS = np.array([n in ("log_count", "doy_sin", "doy_cos", "time_counter")
                                for n in TEMPORAL_NAMES])

STATIC_NAMES = TOPO_NAMES + (
    "lat", "lon", "v69", "v138", "v345", "connection_count",
    "hist_mean", "hist_max", "hist_active_frac", "hist_var",
)
STATIC_CONTINUOUS = np.array([not n.startswith("v") for n in STATIC_NAMES])
TOPOLOGY_COLUMNS = np.arange(len(TOPO_NAMES))


def log_transform(d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValidationError("failure counts must be non-negative")
    return np.log1p(d)


def encode_temporal(date: dt.date, count: int = 0, day_index: int = 0) -> np.ndarray:
    """24 features for one day: log count, day-of-year sinusoid, weekday and
    month one-hots, days since series start and a weekend flag."""
    row = np.zeros(N_TEMPORAL)
    doy = date.timetuple().tm_yday
    angle = 2 * np.pi * doy / DAYS_PER_YEAR
    row[0] = log_transform(count)
    row[1] = np.sin(angle)
    row[2] = np.cos(angle)
    row[3 + date.weekday()] = 1.0
    row[10 + date.month - 1] = 1.0
    row[22] = float(day_index)
    row[23] = 1.0 if date.weekday() >= 5 else 0.0
    return row


def temporal_matrix(series: DailySeries) -> np.ndarray:
    """:func:`encode_temporal` for every day of ``series`` at once."""
    days = series.dates()
    n = days.shape[0]
    out = np.zeros((n, N_TEMPORAL))
    years = days.astype("datetime64[Y]")
    doy = (days - years.astype("datetime64[D]")).astype(np.int64) + 1
    weekday = (days.astype(np.int64) + 3) % 7     # 1970-01-01 was a Thursday
    month = (days.astype("datetime64[M]").astype(np.int64) % 12)
    angle = 2 * np.pi * doy / DAYS_PER_YEAR
    rows = np.arange(n)
    out[:, 0] = log_transform(series.counts)
    out[:, 1] = np.sin(angle)
    out[:, 2] = np.cos(angle)
    out[rows, 3 + weekday] = 1.0
    out[rows, 10 + month] = 1.0
    out[:, 22] = np.arange(n, dtype=np.float64)
    out[:, 23] = (weekday >= 5).astype(np.float64)
    return out


# --- scalers ----------------------------------------------------------------

class RobustScaler:
    """``(x - median) / IQR`` per column; a zero IQR is replaced by 1."""

    def __init__(self):
        self.center_ = None
        self.scale_ = None

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ContractError("scaler needs at least 2 rows to fit")
        q25, med, q75 = np.percentile(X, [25, 50, 75], axis=0)
        iqr = q75 - q25
        self.center_ = med
        self.scale_ = np.where(iqr > 0, iqr, 1.0)
        return self

    def transform(self, X):
        if self.center_ is None:
            raise StateError("scaler used before fit()")
        return (np.asarray(X, dtype=np.float64) - self.center_) / self.scale_


class StandardScaler(RobustScaler):
    """``(x - mean) / std`` per column; a zero std is replaced by 1."""

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ContractError("scaler needs at least 2 rows to fit")
        std = X.std(axis=0)
        self.center_ = X.mean(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        return self


@dataclass
class ScalerParams:
    temporal: RobustScaler
    static: StandardScaler

    def to_arrays(self) -> dict:
        return {
            "temporal_center": self.temporal.center_, "temporal_scale": self.temporal.scale_,
            "static_center": self.static.center_, "static_scale": self.static.scale_,
        }

    @classmethod
    def from_arrays(cls, d) -> "ScalerParams":
        t, s = RobustScaler(), StandardScaler()
        t.center_, t.scale_ = np.asarray(d["temporal_center"]), np.asarray(d["temporal_scale"])
        s.center_, s.scale_ = np.asarray(d["static_center"]), np.asarray(d["static_scale"])
        return cls(t, s)


def fit_scalers(temporal_rows, static_rows) -> ScalerParams:
    return ScalerParams(RobustScaler().fit(temporal_rows), StandardScaler().fit(static_rows))


def apply_scalers(params: ScalerParams, temporal=None, static=None):
    """Scale temporal rows (any leading shape, last axis = features) and static rows."""
    t = None if temporal is None else params.temporal.transform(temporal)
    s = None if static is None else params.static.transform(static)
    return t, s


# --- static vectors ---------------------------------------------------------

def static_pool(topo: TopoFeatures, sites: SiteTable, series: dict, train_end: dt.date) -> np.ndarray:
    """The 15 candidate static features per substation, in ``STATIC_NAMES`` order.

    Historical aggregates use only days up to and including ``train_end``.
    """
    n = len(sites.ids)
    out = np.zeros((n, len(STATIC_NAMES)))
    out[:, :5] = topo.matrix()
    out[:, 5:7] = sites.coords
    for j, v in enumerate(VOLTAGE_CLASSES):
        out[:, 7 + j] = (sites.voltage_class == v).astype(float)
    out[:, 10] = sites.connection_count
    for i, sid in enumerate(sites.ids):
        s = series[sid]
        upto = (train_end - s.start).days + 1
        c = s.counts[:max(0, upto)].astype(float)
        if c.size == 0:
            continue
        out[i, 11] = c.mean()
        out[i, 12] = c.max()
        out[i, 13] = (c > 0).mean()
        out[i, 14] = c.var()
    return out


# --- bootstrap random-forest selection --------------------------------------

@dataclass
class SelectionResult:
    selected: np.ndarray          # column indices, best (lowest CV) first
    importances: np.ndarray       # (iters, n_features)
    frequency: np.ndarray
    names: tuple

    @property
    def mean_importance(self):
        return self.importances.mean(axis=0)

    @property
    def cv(self):
        mean = self.mean_importance
        std = self.importances.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(mean > 0, std / mean, np.inf)

    def report(self) -> list[dict]:
        """Rows sorted by mean importance, highest first."""
        chosen = set(self.selected.tolist())
        mean, cv = self.mean_importance, self.cv
        order = np.argsort(-mean, kind="stable")
        return [{"feature": self.names[j], "mean_importance": float(mean[j]), "cv": float(cv[j]),
                 "selection_frequency": float(self.frequency[j]), "selected": j in chosen}
                for j in order]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["feature", "mean_importance", "cv",
                                               "selection_frequency", "selected"])
            w.writeheader()
            for row in self.report():
                w.writerow({**row, "mean_importance": repr(row["mean_importance"]),
                            "cv": repr(row["cv"]), "selection_frequency": repr(row["selection_frequency"]),
                            "selected": int(row["selected"])})


def select_features(X, y, iters: int = 100, top_k: int = 15, stability: float = 0.8,
                    seed: int = 0, n_trees: int = 10, names=None) -> SelectionResult:
    """Stability selection with bootstrap random forests.

    Iteration ``i`` fits a forest (seed ``seed + i``) on a bootstrap resample
    of the rows and ranks features by impurity importance. Features whose
    top-``top_k`` frequency reaches ``stability`` are eligible; the eligible
    ones with the lowest coefficient of variation of importance are kept,
    topped up by mean importance if fewer than ``top_k`` are eligible.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ContractError("feature selection needs both classes in the labels")
    n, F = X.shape
    names = tuple(names) if names is not None else tuple(f"f{j}" for j in range(F))
    k = min(top_k, F)
    if F < top_k:
        warnings.warn(f"only {F} candidate features for top_k={top_k}; selecting all", stacklevel=2)
    imps = np.zeros((iters, F))
    hits = np.zeros(F)
    for i in range(iters):
        rng = np.random.default_rng(seed + i)
        rows = rng.integers(0, n, size=n)
        if np.unique(y[rows]).size < 2:
            rows = np.concatenate([rows, np.flatnonzero(y != y[rows[0]])[:1]])
        forest = fit_random_forest(X[rows], y[rows], n_trees=n_trees, seed=seed + i)
        imps[i] = forest.importance
        hits[np.argsort(-forest.importance, kind="stable")[:k]] += 1
    freq = hits / iters
    result = SelectionResult(np.empty(0, dtype=np.int64), imps, freq, names)
    cv, mean = result.cv, result.mean_importance
    eligible = np.flatnonzero(freq >= stability)
    chosen = eligible[np.lexsort((eligible, cv[eligible]))][:k].tolist()
    if len(chosen) < k:
        for j in np.argsort(-mean, kind="stable"):
            if j not in chosen:
                chosen.append(int(j))
            if len(chosen) == k:
                break
    result.selected = np.asarray(chosen, dtype=np.int64)
    return result
