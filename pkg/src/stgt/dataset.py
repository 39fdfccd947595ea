"""Aligning substations on one calendar and packing day-group batches.

A :class:`Panel` holds every substation's daily counts and temporal feature
rows on a shared calendar. Samples are addressed by ``(substation, day)``
where ``day`` is the last window day and the label is for ``day + 1``.

Training batches are built from *units*. A unit is one calendar day: the real
samples of that day form a group for spatial attention, and every synthetic
(augmented) sample whose source row falls on that day gets its own group in
which it replaces its source. Synthetic rows therefore attend to real
neighbours of the same day and never to each other.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError
from .features import N_TEMPORAL, temporal_matrix
from .ingest import DailySeries
from .model import Batch


@dataclass
class Panel:
    ids: tuple
    start: dt.date
    counts: np.ndarray        # (n_sub, n_days), zero outside a substation's own span
    observed: np.ndarray      # (n_sub, n_days) bool
    temporal: np.ndarray      # (n_sub, n_days, 24) unscaled feature rows
    adjacency: np.ndarray     # (n_sub, n_sub) 0/1 with unit diagonal

    @property
    def n_sub(self) -> int:
        return len(self.ids)

    @property
    def n_days(self) -> int:
        return self.counts.shape[1]

    def date(self, day) -> np.ndarray:
        return np.datetime64(self.start, "D") + np.asarray(day)


def build_panel(series: dict, adjacency, ids=None) -> Panel:
    """Place every series on the union calendar of all series."""
    ids = tuple(sorted(series)) if ids is None else tuple(ids)
    if not ids:
        raise ContractError("no substations to build a panel from")
    adjacency = np.asarray(adjacency)
    if adjacency.shape != (len(ids), len(ids)):
        raise ValidationError(f"adjacency shape {adjacency.shape} does not match {len(ids)} substations")
    start = min(series[s].start for s in ids)
    end = max(series[s].end for s in ids)
    n_days = (end - start).days + 1
    counts = np.zeros((len(ids), n_days), dtype=np.int64)
    observed = np.zeros((len(ids), n_days), dtype=bool)
    temporal = np.zeros((len(ids), n_days, N_TEMPORAL))
    for i, sid in enumerate(ids):
        s: DailySeries = series[sid]
        off = (s.start - start).days
        sl = slice(off, off + s.n_days)
        counts[i, sl] = s.counts
        observed[i, sl] = True
        temporal[i, sl] = temporal_matrix(s)
    return Panel(ids, start, counts, observed, temporal, adjacency.astype(np.int8))


@dataclass
class SampleIndex:
    sub: np.ndarray
    day: np.ndarray
    label: np.ndarray

    def __len__(self):
        return int(self.sub.shape[0])

    def take(self, rows) -> "SampleIndex":
        return SampleIndex(self.sub[rows], self.day[rows], self.label[rows])

    def label_dates(self, panel: Panel) -> np.ndarray:
        return panel.date(self.day + 1)


def panel_samples(panel: Panel, lookback: int) -> SampleIndex:
    """Every (substation, day) whose window and label day are observed."""
    obs = panel.observed.astype(np.int64)
    # days t with observed[t-L+1 .. t+1] all set
    csum = np.concatenate([np.zeros((panel.n_sub, 1), dtype=np.int64), np.cumsum(obs, axis=1)], axis=1)
    subs, days = [], []
    for t in range(lookback - 1, panel.n_days - 1):
        ok = (csum[:, t + 2] - csum[:, t - lookback + 1]) == lookback + 1
        s = np.flatnonzero(ok)
        subs.append(s)
        days.append(np.full(s.shape, t))
    sub = np.concatenate(subs).astype(np.int64) if subs else np.empty(0, dtype=np.int64)
    day = np.concatenate(days).astype(np.int64) if days else np.empty(0, dtype=np.int64)
    label = (panel.counts[sub, day + 1] > 0).astype(np.int64)
    return SampleIndex(sub, day, label)


def window_rows(panel: Panel, samples: SampleIndex, lookback: int) -> np.ndarray:
    """``(N, L, 24)`` unscaled temporal rows of each sample window."""
    offs = np.arange(-lookback + 1, 1)
    return panel.temporal[samples.sub[:, None], samples.day[:, None] + offs[None, :]]


# --- sample rows ready for the model ----------------------------------------

@dataclass
class RowSet:
    """Model inputs for a set of samples plus bookkeeping for grouping.

    Real rows come first. ``source`` points synthetic rows at the real row they
    stand in for; real rows point at themselves.
    """
    windows: np.ndarray       # (R, L, F_x) scaled
    static: np.ndarray        # (R, F_z) scaled
    node: np.ndarray
    day: np.ndarray
    label: np.ndarray
    synthetic: np.ndarray
    source: np.ndarray
    target: np.ndarray        # rows whose prediction is scored

    def __len__(self):
        return int(self.node.shape[0])

    @property
    def n_real(self) -> int:
        return int((~self.synthetic).sum())


def make_rowset(windows, static, samples: SampleIndex, target=None) -> RowSet:
    n = len(samples)
    return RowSet(
        windows=np.asarray(windows, dtype=np.float64), static=np.asarray(static, dtype=np.float64),
        node=samples.sub.copy(), day=samples.day.copy(), label=samples.label.copy(),
        synthetic=np.zeros(n, dtype=bool), source=np.arange(n),
        target=np.ones(n, dtype=bool) if target is None else np.asarray(target, dtype=bool))


def append_synthetic(rows: RowSet, windows, static, source) -> RowSet:
    """Add synthetic positive rows that inherit node and day from ``source``."""
    source = np.asarray(source, dtype=np.int64)
    if np.any(rows.synthetic[source]):
        raise ContractError("synthetic rows must descend from real rows")
    m = source.shape[0]
    return RowSet(
        windows=np.concatenate([rows.windows, windows]), static=np.concatenate([rows.static, static]),
        node=np.concatenate([rows.node, rows.node[source]]), day=np.concatenate([rows.day, rows.day[source]]),
        label=np.concatenate([rows.label, np.ones(m, dtype=np.int64)]),
        synthetic=np.concatenate([rows.synthetic, np.ones(m, dtype=bool)]),
        source=np.concatenate([rows.source, source]),
        target=np.concatenate([rows.target, np.ones(m, dtype=bool)]))


@dataclass
class Unit:
    real: np.ndarray          # real rows of the day, ordered by node
    phantoms: np.ndarray      # synthetic rows sourced on this day
    n_targets: int


def build_units(rows: RowSet) -> list[Unit]:
    real = np.flatnonzero(~rows.synthetic)
    syn = np.flatnonzero(rows.synthetic)
    days = np.unique(rows.day[real])
    by_day_real = {d: [] for d in days.tolist()}
    for r in real[np.lexsort((rows.node[real], rows.day[real]))]:
        by_day_real[int(rows.day[r])].append(r)
    by_day_syn = {d: [] for d in days.tolist()}
    for r in syn:
        by_day_syn[int(rows.day[r])].append(r)
    units = []
    for d in days.tolist():
        r = np.asarray(by_day_real[d], dtype=np.int64)
        p = np.asarray(by_day_syn[d], dtype=np.int64)
        units.append(Unit(r, p, int(rows.target[r].sum()) + p.size))
    return units


def assemble_batch(rows: RowSet, units, adjacency) -> Batch:
    """Stack units into one :class:`Batch` (groups padded with ``-1``)."""
    groups, is_target = [], []
    for u in units:
        real = u.real.tolist()
        groups.append(real)
        is_target.append(rows.target[u.real].tolist())
        for ph in u.phantoms.tolist():
            src = int(rows.source[ph])
            groups.append([ph if r == src else r for r in real])
            is_target.append([r == src for r in real])
    used = np.unique(np.concatenate([np.asarray(g, dtype=np.int64) for g in groups]))
    local = {int(r): i for i, r in enumerate(used.tolist())}
    S = max(len(g) for g in groups)
    G = len(groups)
    index = np.full((G, S), -1, dtype=np.int64)
    mask = np.zeros((G, S, S))
    targets, labels = [], []
    pos = 0
    for gi, (g, t) in enumerate(zip(groups, is_target)):
        m = len(g)
        index[gi, :m] = [local[r] for r in g]
        nodes = rows.node[g]
        mask[gi, :m, :m] = adjacency[np.ix_(nodes, nodes)]
        for j in range(m):
            if t[j]:
                targets.append(pos + j)
                labels.append(rows.label[g[j]])
        pos += m
    return Batch(windows=rows.windows[used], static=rows.static[used], node=rows.node[used],
                 index=index, mask=mask, targets=np.asarray(targets, dtype=np.int64),
                 labels=np.asarray(labels, dtype=np.int64))


def pack_units(units, order, max_targets: int):
    """Split ``order`` (unit ids) into consecutive runs of at most ``max_targets`` targets."""
    batches, cur, size = [], [], 0
    for u in order:
        n = units[u].n_targets
        if cur and size + n > max_targets:
            batches.append(cur)
            cur, size = [], 0
        cur.append(u)
        size += n
    if cur:
        batches.append(cur)
    return batches


def unit_weights(rows: RowSet, units) -> np.ndarray:
    """Sampling weight per unit: summed inverse class frequency of its scored rows."""
    scored = rows.target.copy()
    labels = rows.label[scored]
    freq = np.array([(labels == 0).mean(), (labels == 1).mean()])
    inv = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 0.0)
    w = np.zeros(len(units))
    for i, u in enumerate(units):
        lab = rows.label[u.real][rows.target[u.real]]
        w[i] = inv[lab].sum() + inv[1] * u.phantoms.size
    return w
