"""Synthetic substation failure logs with planted spatial propagation.

Each substation gets a position inside a bounded region, a voltage class, a
connection count and a frailty offset. Failure *occurrences* on day ``t`` are
Poisson with log-rate

    log(base_rate) + amp * sin(2 pi doy / 365.25) + frailty_s
        + propagation_strength * log(1 + #neighbours that failed on day t-1)

and every occurrence is logged as ``1 + Poisson(burst_mean)`` records, so the
daily record count exceeds the occurrence count on failure days. Neighbours are
the substations closer than ``tau`` km. The logarithm keeps the process
subcritical, so cascades die out instead of saturating the grid.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ValidationError
from .graph import DEFAULT_TAU_KM, build_adjacency
from .ingest import EventRecord, SiteTable

VOLTAGE_CLASSES = (69, 138, 345)
REGION_CENTER = (35.5, -97.5)
CAUSES = ("weather", "equipment", "vegetation", "animal", "unknown")


@dataclass(frozen=True)
class SynthConfig:
    n_substations: int = 10
    years: int = 3
    seed: int = 0
    propagation_strength: float = 2.0
    base_rate: float = 0.028
    seasonal_amplitude: float = 0.5
    burst_mean: float = 4.0
    frailty_sd: float = 0.1
    start: str = "2020-01-01"
    tau: float = DEFAULT_TAU_KM

    def validate(self):
        if self.n_substations < 5:
            raise ValidationError("n_substations must be at least 5")
        if self.years < 1:
            raise ValidationError("years must be at least 1")
        if not self.base_rate > 0:
            raise ValidationError("base_rate must be positive")
        if self.propagation_strength < 0 or self.burst_mean < 0 or self.frailty_sd < 0:
            raise ValidationError("propagation_strength, burst_mean and frailty_sd must be >= 0")
        dt.date.fromisoformat(self.start)


@dataclass
class SynthData:
    config: SynthConfig
    sites: SiteTable
    start: dt.date
    counts: np.ndarray        # (n_substations, n_days) daily record counts
    rates: np.ndarray         # (n_substations, n_days) occurrence rates used
    events: list

    @property
    def period(self):
        return self.start, self.start + dt.timedelta(days=self.counts.shape[1] - 1)

    def metadata(self) -> dict:
        n_days = self.counts.shape[1]
        return {
            "config": asdict(self.config),
            "n_days": n_days,
            "period": [str(d) for d in self.period],
            "n_events": len(self.events),
            "positive_day_rate": float((self.counts > 0).mean()),
        }


def _place_sites(rng, n, tau):
    # box side chosen so the default tau gives an average degree of roughly 3-5
    side_km = 0.95 * tau * np.sqrt(n)
    lat0, lon0 = REGION_CENTER
    km_lat = 111.2
    km_lon = 111.2 * np.cos(np.radians(lat0))
    best = None
    for _ in range(200):
        xy = rng.uniform(-side_km / 2, side_km / 2, size=(n, 2))
        coords = np.column_stack([lat0 + xy[:, 1] / km_lat, lon0 + xy[:, 0] / km_lon])
        g = build_adjacency(coords, tau)
        deg = g.simple.sum(axis=1)
        if deg.min() >= 1 and 3.0 <= deg.mean() <= 5.0:
            return coords, g
        if best is None and deg.min() >= 1:
            best = (coords, g)
    if best is None:
        best = (coords, g)
    return best


def synth_generate(config: SynthConfig = SynthConfig()) -> SynthData:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_substations
    ids = tuple(f"SUB{i:03d}" for i in range(n))
    coords, g = _place_sites(rng, n, config.tau)
    nbr = g.simple.astype(float)

    voltage = rng.choice(VOLTAGE_CLASSES, size=n, p=(0.4, 0.35, 0.25))
    conn = nbr.sum(axis=1).astype(np.int64) + rng.poisson(1.5, size=n) + 1
    frailty = (0.25 * (voltage == 69) + 0.05 * (conn - conn.mean())
               + rng.normal(0.0, config.frailty_sd, size=n))
    frailty = frailty - frailty.mean()

    start = dt.date.fromisoformat(config.start)
    stop = dt.date(start.year + config.years, start.month, start.day)
    n_days = (stop - start).days
    doy = np.array([(start + dt.timedelta(days=t)).timetuple().tm_yday for t in range(n_days)])
    seasonal = config.seasonal_amplitude * np.sin(2 * np.pi * doy / 365.25)

    counts = np.zeros((n, n_days), dtype=np.int64)
    rates = np.zeros((n, n_days))
    base = np.log(config.base_rate) + frailty
    failed_prev = np.zeros(n)
    for t in range(n_days):
        lam = np.exp(base + seasonal[t] + config.propagation_strength * np.log1p(nbr @ failed_prev))
        occ = rng.poisson(lam)
        extra = rng.poisson(config.burst_mean * occ)
        counts[:, t] = occ + extra
        rates[:, t] = lam
        failed_prev = (occ > 0).astype(float)

    events = []
    secs = rng.integers(0, 86400, size=int(counts.sum()))
    causes = rng.integers(0, len(CAUSES), size=secs.size)
    k = 0
    base_ts = dt.datetime(start.year, start.month, start.day, tzinfo=dt.timezone.utc)
    for t in range(n_days):
        day_ts = base_ts + dt.timedelta(days=t)
        for s in np.flatnonzero(counts[:, t]):
            c = int(counts[s, t])
            for off, cause in sorted(zip(secs[k:k + c].tolist(), causes[k:k + c].tolist())):
                events.append(EventRecord(ids[s], day_ts + dt.timedelta(seconds=off), CAUSES[cause]))
            k += c

    sites = SiteTable(ids, coords, voltage.astype(np.int64), conn)
    return SynthData(config, sites, start, counts, rates, events)
