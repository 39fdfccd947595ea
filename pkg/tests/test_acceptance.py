"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from stgt import autodiff as ad
from stgt import augment as au
from stgt import graph as gr
from stgt import model as md
from stgt import pipeline as pl
from stgt import train as tr
from stgt.config import PipelineConfig
from stgt.dataset import SampleIndex, make_rowset
from stgt.errors import LeakageError
from stgt.ingest import aggregate_daily
from stgt.synth import SynthConfig, synth_generate
from stgt.trees import fit_gbt, predict_gbt

from builders import random_batch, small_config
from oracles import (betweenness_enum, central_difference, closeness_enum, clustering_enum, degree_enum,
                     pagerank_dense, random_graph, relative_error)

# absolute resolution of a central difference with h=1e-5 on this loss (measured spread ~1e-10..6e-10);
# smaller disagreements carry no information about the analytic gradient
FD_RESOLUTION = 1e-9
TOL = 1e-4

SINGLE_THREAD = {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1",
                 "NUMBA_NUM_THREADS": "1"}


# --- 1 ------------------------------------------------------------------------

def entry_error(f, x, idx, g, h=1e-5):
    """Relative error of ``g`` against a central difference at ``x[idx]``.

    When the stencil straddles a ReLU kink the central difference averages two
    slopes; the gradient is then compared with the one-sided difference of the
    piece it belongs to. Returns ``(error, straddled)``.
    """
    e = relative_error(g, central_difference(f, x, idx, h), FD_RESOLUTION)
    if e < TOL:
        return e, False
    old = x[idx]
    f0 = f()
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    one_sided = min(relative_error(g, (up - f0) / h, FD_RESOLUTION), relative_error(g, (f0 - down) / h, FD_RESOLUTION))
    return one_sided, one_sided < TOL


def fd_probe(params, f, grads, rng, per_tensor=48, top=8):
    """Worst relative error over sampled entries and one random direction per tensor.

    Returns ``(worst, where, n_checked, n_straddled)``.
    """
    worst, where, checked, straddled = 0.0, None, 0, 0
    for k, t in params.items():
        g = grads[k]
        flat = np.arange(t.data.size)
        if t.data.size <= per_tensor + top:
            pick = flat
        else:
            biggest = np.argsort(-np.abs(g).ravel())[:top]
            pick = np.union1d(biggest, rng.choice(flat, per_tensor, replace=False))
        for i in pick:
            idx = np.unravel_index(i, t.data.shape)
            e, kink = entry_error(f, t.data, idx, g[idx])
            straddled += kink
            if e > worst:
                worst, where = e, (k, tuple(int(j) for j in idx))
            checked += 1
        v = rng.normal(size=t.data.shape)
        v /= np.linalg.norm(v)
        base = t.data.copy()
        h = 1e-5
        t.data = base + h * v
        up = f()
        t.data = base - h * v
        down = f()
        t.data = base
        e = relative_error(float((g * v).sum()), (up - down) / (2 * h), FD_RESOLUTION)
        if e > worst:
            worst, where = e, (k, "direction")
    return worst, where, checked, straddled


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    lcfg = md.LossConfig(positive_ratio=0.05)
    results = []
    # default width: every tensor, sampled entries plus a whole-tensor direction
    cfg = md.ModelConfig(n_static=15, n_nodes=10)
    params = md.init_params(cfg, 1)
    for k in params:
        params[k].data = params[k].data + 0.05 * rng.normal(size=params[k].shape)
    batch = random_batch(cfg, rng, np.ones((10, 10)), labels=[1, 0], nodes=[3, 7])
    with ad.Tape() as tape:
        tape.backward(md.focal_loss(md.forward(params, batch, cfg), batch.labels, lcfg))
        grads = {k: v.grad.copy() for k, v in params.items()}
    f = lambda: md.focal_loss(md.forward(params, batch, cfg), batch.labels, lcfg).item()
    results.append(fd_probe(params, f, grads, rng))
    # reduced width: every scalar entry
    scfg = small_config(n_nodes=2, d=8, heads=2, lookback=4, static_hidden=4, head_hidden=(6, 4))
    sp = md.init_params(scfg, 2)
    for k in sp:
        sp[k].data = sp[k].data + 0.1 * rng.normal(size=sp[k].shape)
    sb = random_batch(scfg, rng, np.ones((2, 2)), labels=[1, 0])
    with ad.Tape() as tape:
        tape.backward(md.focal_loss(md.forward(sp, sb, scfg), sb.labels, lcfg))
        sg = {k: v.grad.copy() for k, v in sp.items()}
    sf = lambda: md.focal_loss(md.forward(sp, sb, scfg), sb.labels, lcfg).item()
    results.append(fd_probe(sp, sf, sg, rng, per_tensor=10 ** 9))
    worst, where, *_ = max(results, key=lambda r: r[0])
    elapsed = time.perf_counter() - t0
    ok = worst < TOL and elapsed < 60
    verdict(1, "gradient fidelity", ok,
            f"{len(params)} tensors, {sum(r[2] for r in results)} entries ({sum(r[3] for r in results)} on a ReLU kink, "
            f"matched one-sided), worst rel err {worst:.2e} at {where}, "
            f"{elapsed:.1f}s")
    assert ok


# --- 2 ------------------------------------------------------------------------

def test_criterion_2_centrality_oracles(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 8))
        a = random_graph(rng, n, rng.uniform(0.1, 0.9))
        f = gr.topo_feature_vector(gr.graph_from_adjacency(a))
        for got, want in ((f.degree, degree_enum(a)), (f.betweenness, betweenness_enum(a)),
                          (f.closeness, closeness_enum(a)), (f.pagerank, pagerank_dense(a)),
                          (f.clustering, clustering_enum(a))):
            worst = max(worst, float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))
    ok = worst <= 1e-8
    verdict(2, "centrality oracles", ok, f"100 graphs, max abs diff {worst:.1e}")
    assert ok


# --- 3 ------------------------------------------------------------------------

def test_criterion_3_topology_masking(verdict):
    rng = np.random.default_rng(3)
    cfg = md.ModelConfig(n_static=15, n_nodes=10)
    params = md.init_params(cfg, 3)
    params["node_emb"].data = rng.normal(size=params["node_emb"].shape)
    coords = np.column_stack([35 + rng.uniform(0, 1.5, 10), -97 + rng.uniform(0, 1.5, 10)])
    A = gr.build_adjacency(coords, 50.0).adjacency
    batch = random_batch(cfg, rng, A)
    _, w = md.forward(params, batch, cfg, keep_weights=True)
    W = w["spatial"][0, 0]
    apart = A == 0
    max_w = float(np.abs(W[apart]).max()) if apart.any() else 0.0
    # value path of the same attention, probed row by row
    h_star, _ = md.temporal_encoder(params, md.embed_inputs(params, batch.windows), 10, heads=cfg.heads)
    x = h_star.data + params["node_emb"].data[batch.node]
    v = ad.Tensor(x.copy(), requires_grad=True)
    max_g = 0.0
    for i in range(10):
        with ad.Tape() as tape:
            g = ad.grouped_attention(x, x, v, batch.index, mask=A[None].astype(float), mode="post_softmax",
                                     scale_by=1 / np.sqrt(cfg.d))
            tape.backward(ad.sum_all(ad.take_rows(g, [i])))
            max_g = max(max_g, float(np.abs(v.grad[A[i] == 0]).max()) if (A[i] == 0).any() else 0.0)
    pre = md.ModelConfig(n_static=15, n_nodes=10, mask_mode="pre_softmax")
    _, wp = md.forward(params, batch, pre, keep_weights=True)
    Wp = wp["spatial"][0, 0]
    row_err = float(np.abs(Wp.sum(axis=1) - 1).max())
    ok = apart.sum() > 0 and max_w == 0.0 and max_g == 0.0 and row_err <= 1e-12 and np.all(Wp[apart] == 0)
    verdict(3, "topology masking", ok,
            f"{int(apart.sum())} non-adjacent pairs, max weight {max_w}, max grad {max_g}, "
            f"pre-softmax row-sum error {row_err:.1e}")
    assert ok


# --- 4 ------------------------------------------------------------------------

def test_criterion_4_loss_identities(verdict):
    rng = np.random.default_rng(4)
    p = rng.uniform(1e-3, 1 - 1e-3, size=(200, 1))
    y = rng.integers(0, 2, 200)
    alpha = 0.3
    got = md.focal_loss(p, y, md.LossConfig(alpha=alpha, gamma=0.0), beta=1.0).item()
    pt = np.where(y[:, None] == 1, p, 1 - p)
    want = float(np.mean(-alpha * np.log(pt)))
    hand = md.focal_loss(np.array([[0.9]]), [1], md.LossConfig(alpha=0.3, gamma=2.0), beta=1.0).item()
    ok = abs(got - want) <= 1e-12 and abs(hand - 3.161e-4) <= 1e-7
    verdict(4, "loss identities", ok, f"gamma=0 diff {abs(got - want):.1e}, hand case {hand:.4e}")
    assert ok


# --- 5 ------------------------------------------------------------------------

def test_criterion_5_augmentation_contract(verdict):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(1000, 8))
    y = np.zeros(1000, dtype=int)
    y[rng.choice(1000, 50, replace=False)] = 1
    out = au.balance_to_ratio(X, y, au.AugmentConfig(seed=5))
    frac = float(out.y.mean())
    flagged = bool(out.synthetic[1000:].all() and not out.synthetic[:1000].any())
    probs = rng.random(out.y.size)
    try:
        tr.evaluate(probs, out.y, 0.5, boot_iters=10, synthetic=out.synthetic)
        refused = False
    except LeakageError:
        refused = True
    ok = 0.300 <= frac <= 0.310 and flagged and refused
    verdict(5, "augmentation contract", ok,
            f"positive fraction {frac:.4f}, {int(out.synthetic.sum())} synthetic rows flagged, evaluation refused")
    assert ok


# --- 6 ------------------------------------------------------------------------

def prepared(seed=0, strength=2.0, overrides=None):
    cfg = PipelineConfig(seed=seed).with_overrides(overrides or {})
    data = synth_generate(SynthConfig(seed=seed, propagation_strength=strength, base_rate=cfg.synth.base_rate))
    return pl.prepare(aggregate_daily(data.events, data.period), data.sites, cfg)


def test_criterion_6_anti_leakage(verdict):
    prep = prepared(seed=6)
    d = {k: prep.label_dates(v) for k, v in prep.parts.items()}
    ordered = d["train"].max() < d["val"].min() and d["val"].max() < d["test"].min()
    pl.check_partitions(prep)
    folds = tr.cv_folds(d["train"], 5)
    chained = all(d["train"][f].max() < d["train"][h].min() for f, h in folds)
    tr.assert_no_leakage([(f"fold {i}", d["train"][f], d["train"][h]) for i, (f, h) in enumerate(folds)])
    # every window ends before its label day
    windows_ok = bool(np.all(prep.panel.date(prep.samples.day) < prep.label_dates()))
    # the scan must reject a leaking split
    caught = 0
    for fit, ev in ((d["val"], d["train"]), (np.append(d["train"], d["val"].min()), d["val"])):
        try:
            tr.assert_no_leakage([("planted", fit, ev)])
        except LeakageError:
            caught += 1
    ok = ordered and chained and windows_ok and caught == 2
    verdict(6, "anti-leakage", ok,
            f"train<{d['val'].min()}<=val<{d['test'].min()}<=test, {len(folds)} forward-chained folds, "
            f"{caught}/2 planted leaks caught")
    assert ok


# --- 7 ------------------------------------------------------------------------

class _Reached(Exception):
    pass


def test_criterion_7_capacity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cfg = md.ModelConfig(n_static=6, n_nodes=10)
    n_days, n_sub = 20, 10
    sub = np.tile(np.arange(n_sub), n_days)
    day = np.repeat(np.arange(n_days), n_sub)
    windows = rng.normal(size=(200, cfg.lookback, cfg.n_temporal))
    label = (windows[:, -1, 0] + windows[:, -2, 0] > 1.0).astype(np.int64)
    static = np.tile(rng.normal(size=(n_sub, 6)), (n_days, 1))
    rows = make_rowset(windows, static, SampleIndex(sub, day, label))
    adj = random_graph(rng, n_sub, 0.4)
    params = md.init_params(cfg, 7)
    lcfg = md.LossConfig(positive_ratio=float(label.mean()))
    state = {"epoch": None, "f1": 0.0}

    def check(epoch, hist):
        probs = tr.predict_rows(params, rows, cfg, adj)
        f1 = tr.evaluate(probs, label, 0.5, boot_iters=0).values["f1"]
        state["f1"] = f1
        if f1 >= 0.99:
            state["epoch"] = epoch
            raise _Reached

    try:
        tr.train_loop(params, rows, None, adj, cfg, lcfg,
                      tr.TrainConfig(max_epochs=500, patience=500, seed=7), callback=check)
    except _Reached:
        pass
    elapsed = time.perf_counter() - t0
    ok = state["epoch"] is not None and elapsed < 300
    verdict(7, "capacity sanity", ok,
            f"{label.mean():.0%} positive, train F1 {state['f1']:.3f} at epoch {state['epoch']}, {elapsed:.0f}s")
    assert ok


# --- 8 ------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)
STRENGTH_OFF_BASE_RATE = 0.045
COMPARISON_OVERRIDES = {
    "features": {"time_counter": False},
    "augment": {"enabled": False},
    "train": {"max_epochs": 30, "patience": 5, "weighted_sampling": False, "lr": 2e-4},
}


def compare_once(seed, strength, base_rate):
    t0 = time.perf_counter()
    over = {**COMPARISON_OVERRIDES, "synth": {"propagation_strength": strength, "base_rate": base_rate}}
    prep = prepared(seed, strength, over)
    st, _, _ = pl.run_stgt(prep)
    gb, _ = pl.run_gbt(prep, spatial=False)
    seconds = time.perf_counter() - t0
    gbs, _ = pl.run_gbt(prep, spatial=True, tag="gbt_spatial")     # reported, not compared
    return {"stgt_f1": st.report.values["f1"], "stgt_recall": st.report.values["recall"],
            "gbt_f1": gb.report.values["f1"], "gbt_recall": gb.report.values["recall"],
            "gbt_spatial_f1": gbs.report.values["f1"],
            "seconds": seconds}


@pytest.fixture(scope="module")
def comparisons():
    base = PipelineConfig().synth.base_rate
    on = [compare_once(s, 2.0, base) for s in SEEDS]
    off = [compare_once(s, 0.0, STRENGTH_OFF_BASE_RATE) for s in SEEDS]
    return on, off


def test_criterion_8_spatial_advantage(verdict, comparisons):
    on, off = comparisons
    mean = lambda runs, k: float(np.mean([r[k] for r in runs]))
    gap_on = mean(on, "stgt_f1") - mean(on, "gbt_f1")
    gap_off = mean(off, "stgt_f1") - mean(off, "gbt_f1")
    rec_ok = mean(on, "stgt_recall") >= mean(on, "gbt_recall")
    slowest = max(r["seconds"] for r in on + off)
    ok = rec_ok and gap_on >= 0.03 and gap_off < 0.03 and slowest < 600
    per_seed = ", ".join(f"{r['stgt_f1']:.3f}/{r['gbt_f1']:.3f}" for r in on)
    verdict(8, "spatial advantage on planted propagation", ok,
            f"F1 gap {gap_on:+.3f} with propagation (per seed ST-GT/GBT {per_seed}), "
            f"{gap_off:+.3f} without; GBT with neighbour lags {mean(on, 'gbt_spatial_f1'):.3f}; "
            f"recall {mean(on, 'stgt_recall'):.3f} vs {mean(on, 'gbt_recall'):.3f}; "
            f"slowest run {slowest:.0f}s")
    assert ok


# --- 9 ------------------------------------------------------------------------

def test_criterion_9_boosting_soundness(verdict):
    rng = np.random.default_rng(9)

    def draw(n):
        X = rng.uniform(-1, 1, size=(n, 2))
        return X, (X[:, 0] - 0.5 * X[:, 1] > 0.1).astype(int)

    X, y = draw(1000)
    Xt, yt = draw(1000)
    m = fit_gbt(X, y, seed=9)
    acc = float(((predict_gbt(m, Xt) >= 0.5) == yt).mean())
    trace = np.asarray(m.loss_trace)
    rises = int(np.sum(np.diff(trace) > 1e-12))
    ok = acc >= 0.95 and rises == 0
    verdict(9, "boosting soundness", ok, f"test accuracy {acc:.3f}, {len(trace) - 1} rounds, {rises} loss increases")
    assert ok


# --- 10 -----------------------------------------------------------------------

DETERMINISM_CONFIG = {"train": {"max_epochs": 3}, "eval": {"boot_iters": 200}}


def run_cli(out, cfg_path):
    env = {**os.environ, **SINGLE_THREAD}
    for step in ("synth", "ingest", "select", "train-stgt", "train-gbt", "evaluate"):
        subprocess.run([sys.executable, "-m", "stgt.cli", step, "--config", str(cfg_path), "--seed", "10",
                        "--out", str(out)], env=env, check=True, capture_output=True)
    return (out / "metrics.json").read_bytes()


def test_criterion_10_determinism_and_persistence(verdict, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(DETERMINISM_CONFIG))
    a = run_cli(tmp_path / "a", cfg_path)
    b = run_cli(tmp_path / "b", cfg_path)
    params, mcfg, meta, arrays = md.load_checkpoint(tmp_path / "a" / "stgt_model.npz")
    rng = np.random.default_rng(10)
    batch = random_batch(mcfg, rng, arrays["adjacency"])
    before = md.forward(params, batch, mcfg).data
    md.save_checkpoint(tmp_path / "again.npz", params, mcfg, meta, arrays)
    q, qcfg, _, _ = md.load_checkpoint(tmp_path / "again.npz")
    after = md.forward(q, batch, qcfg).data
    same_metrics = a == b
    same_preds = bool(np.array_equal(before, after))
    ok = same_metrics and same_preds
    verdict(10, "determinism and persistence", ok,
            f"metrics.json identical: {same_metrics} ({len(a)} bytes), reloaded predictions identical: {same_preds}")
    assert ok


# --- 11 -----------------------------------------------------------------------

def test_criterion_11_bootstrap_intervals(verdict):
    def draw(n, seed=11):
        rng = np.random.default_rng(seed)
        labels = (rng.random(n) < 0.2).astype(int)
        probs = np.clip(0.35 * labels + 0.65 * rng.random(n), 0, 1)
        return probs, labels

    widths, contained = {}, True
    for n in (100, 1000, 10_000):
        probs, labels = draw(n)
        rep = tr.evaluate(probs, labels, 0.5, boot_iters=1000, seed=11)
        for m in tr.METRICS:
            lo, hi = rep.ci[m]
            contained &= lo <= rep.values[m] <= hi
        widths[n] = {m: rep.ci[m][1] - rep.ci[m][0] for m in tr.METRICS}
    narrower = all(widths[100][m] > widths[1000][m] > widths[10_000][m] for m in tr.METRICS)
    ok = contained and narrower
    f1w = " > ".join(f"{widths[n]['f1']:.3f}" for n in (100, 1000, 10_000))
    verdict(11, "bootstrap intervals", ok, f"F1 interval width {f1w} at n=100/1000/10000; all contain the point")
    assert ok
