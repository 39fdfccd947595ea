import numpy as np
import pytest

from stgt.errors import ValidationError
from stgt.ingest import aggregate_daily, write_events_csv
from stgt.synth import SynthConfig, synth_generate


def lagged_residual_correlation(data):
    """Correlation between a substation's deseasonalised count on day t and the
    number of its neighbours that failed on day t-1, pooled over substations."""
    from stgt.graph import build_adjacency
    nbr = build_adjacency(data.sites.coords).simple.astype(float)
    start = np.datetime64(data.start, "D")
    month = ((start + np.arange(data.counts.shape[1])).astype("datetime64[M]").astype(int)) % 12
    counts = data.counts.astype(float)
    resid = counts.copy()
    for m in range(12):
        cols = month == m
        resid[:, cols] -= counts[:, cols].mean(axis=1, keepdims=True)
    nbr_prev = (nbr @ (data.counts > 0))[:, :-1]
    return np.corrcoef(nbr_prev.ravel(), resid[:, 1:].ravel())[0, 1]


def test_no_propagation_means_no_lagged_correlation():
    # about 10k substation-days
    data = synth_generate(SynthConfig(seed=3, years=3, propagation_strength=0.0, base_rate=0.04))
    assert data.counts.size >= 10_000
    assert abs(lagged_residual_correlation(data)) < 0.05


def test_propagation_creates_lagged_correlation():
    data = synth_generate(SynthConfig(seed=3, years=3, propagation_strength=2.0))
    assert lagged_residual_correlation(data) > 0.1


def test_default_positive_rate_near_five_percent():
    rates = [(synth_generate(SynthConfig(seed=s)).counts > 0).mean() for s in range(3)]
    for r in rates:
        assert 0.03 <= r <= 0.07


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        write_events_csv(synth_generate(SynthConfig(seed=7, years=1)).events, tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_events_aggregate_back_to_counts():
    data = synth_generate(SynthConfig(seed=1, years=1))
    series = aggregate_daily(data.events, data.period)
    for i, sid in enumerate(data.sites.ids):
        np.testing.assert_array_equal(series[sid].counts, data.counts[i])


def test_layout_gives_connected_neighbourhoods():
    from stgt.graph import build_adjacency
    data = synth_generate(SynthConfig(seed=0, years=1))
    deg = build_adjacency(data.sites.coords).simple.sum(axis=1)
    assert deg.min() >= 1


@pytest.mark.parametrize("kw", [{"n_substations": 4}, {"years": 0}, {"base_rate": 0.0},
                                {"propagation_strength": -1.0}])
def test_invalid_config(kw):
    with pytest.raises(ValidationError):
        synth_generate(SynthConfig(**kw))
