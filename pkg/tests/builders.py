"""Small random inputs for model-level tests."""
import numpy as np

from stgt.model import Batch, ModelConfig


def small_config(**kw):
    base = dict(n_temporal=24, n_static=6, n_nodes=4, d=16, heads=4, lookback=5,
                n_blocks=2, ff_mult=2, static_hidden=8, head_hidden=(12, 8))
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, rng, adjacency, labels=None, nodes=None):
    """One day-group holding every node of ``adjacency`` (or ``nodes``)."""
    nodes = np.arange(adjacency.shape[0]) if nodes is None else np.asarray(nodes)
    n = nodes.size
    windows = rng.normal(size=(n, cfg.lookback, cfg.n_temporal))
    static = rng.normal(size=(n, cfg.n_static))
    mask = np.asarray(adjacency, dtype=float)[np.ix_(nodes, nodes)][None]
    labels = np.arange(n) % 2 if labels is None else np.asarray(labels)
    return Batch(windows=windows, static=static, node=nodes, index=np.arange(n)[None, :],
                 mask=mask, targets=np.arange(n), labels=labels)
