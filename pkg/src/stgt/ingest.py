"""Event logs to gap-free daily failure counts, substation filtering and windows."""
from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

MIN_DAYS = 180
MIN_FAILURES = 100
LOOKBACK = 14

EVENT_COLUMNS = ("substation_id", "timestamp")
COORD_COLUMNS = ("substation_id", "lat", "lon", "voltage_class", "connection_count")


@dataclass(frozen=True)
class EventRecord:
    substation_id: str
    timestamp: dt.datetime          # UTC, tz-aware
    cause: str | None = None
    equipment: str | None = None

    @property
    def day(self) -> dt.date:
        return self.timestamp.date()


@dataclass(frozen=True)
class DailySeries:
    substation_id: str
    start: dt.date
    counts: np.ndarray              # int64, one entry per calendar day

    def __post_init__(self):
        if np.any(self.counts < 0):
            raise ValidationError(f"{self.substation_id}: negative daily count")

    @property
    def n_days(self) -> int:
        return int(self.counts.shape[0])

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=self.n_days - 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def dates(self) -> np.ndarray:
        return np.datetime64(self.start, "D") + np.arange(self.n_days)


@dataclass(frozen=True)
class Sample:
    substation_id: str
    day: dt.date                    # last day of the window
    window: np.ndarray              # counts for day-L+1 .. day
    label: int                      # 1 if the following day has a failure

    @property
    def label_day(self) -> dt.date:
        return self.day + dt.timedelta(days=1)


def parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = dt.datetime.fromisoformat(text)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def read_events_csv(path):
    """Parse an event log. Returns ``(records, n_rejected)``.

    Columns: ``substation_id,timestamp[,cause,equipment]``. Rows that cannot be
    parsed are skipped and counted.
    """
    records, rejected = [], 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EVENT_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            sid = (row.get("substation_id") or "").strip()
            try:
                if not sid:
                    raise ValueError("empty substation_id")
                ts = parse_timestamp(row.get("timestamp") or "")
            except (ValueError, TypeError):
                rejected += 1
                continue
            records.append(EventRecord(sid, ts, row.get("cause") or None, row.get("equipment") or None))
    if rejected:
        log.warning("%s: rejected %d malformed row(s)", path, rejected)
    return records, rejected


def write_events_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["substation_id", "timestamp", "cause", "equipment"])
        for r in records:
            w.writerow([r.substation_id, r.timestamp.isoformat().replace("+00:00", "Z"),
                        r.cause or "", r.equipment or ""])


def aggregate_daily(events, period=None) -> dict[str, DailySeries]:
    """Count events per substation and UTC day.

    With ``period=(first, last)`` (inclusive dates) every series covers the whole
    period and events outside it are dropped. Without a period each series runs
    from the substation's first to last event day. Missing days are zero.
    """
    per_sub = defaultdict(lambda: defaultdict(int))
    dropped = 0
    if period is not None:
        first, last = period
        if last < first:
            raise ValidationError("empty study period")
    for ev in events:
        day = ev.day
        if period is not None and not (first <= day <= last):
            dropped += 1
            continue
        per_sub[ev.substation_id][day] += 1
    if dropped:
        log.info("dropped %d event(s) outside the study period", dropped)
    out = {}
    for sid in sorted(per_sub):
        days = per_sub[sid]
        start, end = (first, last) if period is not None else (min(days), max(days))
        counts = np.zeros((end - start).days + 1, dtype=np.int64)
        for day, c in days.items():
            counts[(day - start).days] = c
        out[sid] = DailySeries(sid, start, counts)
    return out


def filter_substations(series, min_days: int = MIN_DAYS, min_failures: int = MIN_FAILURES):
    """Keep series with at least ``min_days`` observation days and ``min_failures`` events."""
    return [s for s in series if s.n_days >= min_days and s.total >= min_failures]


def window_positions(n_days: int, lookback: int = LOOKBACK) -> np.ndarray:
    """Indices ``t`` of the last window day for every sample of a series."""
    if n_days < lookback + 1:
        return np.empty(0, dtype=np.int64)
    return np.arange(lookback - 1, n_days - 1, dtype=np.int64)


def make_windows(series: DailySeries, lookback: int = LOOKBACK) -> list[Sample]:
    counts = series.counts
    out = []
    for t in window_positions(series.n_days, lookback):
        out.append(Sample(
            substation_id=series.substation_id,
            day=series.start + dt.timedelta(days=int(t)),
            window=counts[t - lookback + 1:t + 1].astype(float),
            label=int(counts[t + 1] > 0),
        ))
    return out


# --- daily-series and coordinate files --------------------------------------

def write_daily_csv(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["substation_id", "date", "count"])
        for s in series:
            for day, c in zip(s.dates(), s.counts):
                w.writerow([s.substation_id, str(day), int(c)])


def read_daily_csv(path) -> list[DailySeries]:
    rows = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("substation_id", "date", "count"):
            if col not in (reader.fieldnames or ()):
                raise ValidationError(f"{path}: missing column {col!r}")
        for row in reader:
            rows[row["substation_id"]][dt.date.fromisoformat(row["date"])] = int(row["count"])
    out = []
    for sid in sorted(rows):
        days = rows[sid]
        start, end = min(days), max(days)
        counts = np.zeros((end - start).days + 1, dtype=np.int64)
        for day, c in days.items():
            counts[(day - start).days] = c
        out.append(DailySeries(sid, start, counts))
    return out


@dataclass(frozen=True)
class SiteTable:
    """Per-substation coordinates and operating metadata."""
    ids: tuple
    coords: np.ndarray
    voltage_class: np.ndarray
    connection_count: np.ndarray

    def subset(self, ids) -> "SiteTable":
        pos = {s: i for i, s in enumerate(self.ids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise ValidationError(f"no coordinates for substation(s) {missing}")
        idx = np.array([pos[s] for s in ids], dtype=np.int64)
        return SiteTable(tuple(ids), self.coords[idx], self.voltage_class[idx], self.connection_count[idx])


def write_coords_csv(sites: SiteTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(COORD_COLUMNS))
        for i, sid in enumerate(sites.ids):
            w.writerow([sid, repr(float(sites.coords[i, 0])), repr(float(sites.coords[i, 1])),
                        int(sites.voltage_class[i]), int(sites.connection_count[i])])


def read_coords_csv(path) -> SiteTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in COORD_COLUMNS:
            if col not in (reader.fieldnames or ()):
                raise ValidationError(f"{path}: missing column {col!r}")
        rows = list(reader)
    rows.sort(key=lambda r: r["substation_id"])
    return SiteTable(
        ids=tuple(r["substation_id"] for r in rows),
        coords=np.array([[float(r["lat"]), float(r["lon"])] for r in rows]).reshape(-1, 2),
        voltage_class=np.array([int(r["voltage_class"]) for r in rows], dtype=np.int64),
        connection_count=np.array([int(r["connection_count"]) for r in rows], dtype=np.int64),
    )
