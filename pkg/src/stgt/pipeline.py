"""End-to-end experiment steps shared by the command line and the tests."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, balance_to_ratio
from .config import PipelineConfig
from .dataset import (Panel, RowSet, SampleIndex, append_synthetic, assemble_batch, build_panel,
                      build_units, make_rowset, panel_samples, window_rows)
from .errors import ConfigError, ValidationError
from .features import (STATIC_CONTINUOUS, STATIC_NAMES, TEMPORAL_CONTINUOUS, TEMPORAL_NAMES, TOPOLOGY_COLUMNS,
                       ScalerParams, SelectionResult, fit_scalers, select_features, static_pool)
from .graph import GridGraph, TopoFeatures, build_adjacency, topo_feature_vector
from .ingest import DailySeries, SiteTable, filter_substations
from .model import LossConfig, ModelConfig, ModelParams, forward, init_params
from .train import (MetricsReport, SplitSpec, TrainConfig, assert_no_leakage, cv_folds, evaluate,
                    predict_rows, select_threshold, temporal_split, train_loop)
from .trees import GbtModel, fit_gbt, predict_gbt

log = logging.getLogger(__name__)

NEIGHBOR_SPANS = (1, 3, 7, 14)
TIME_COUNTER = TEMPORAL_NAMES.index("time_counter")


# --- preparation ------------------------------------------------------------

@dataclass
class FeatureState:
    """Everything fitted on training rows: static pool, selection and scalers."""
    pool: np.ndarray              # (n_sub, 15) raw candidate static features
    static_cols: np.ndarray       # indices into STATIC_NAMES
    selection: SelectionResult | None
    scalers: ScalerParams
    positive_ratio: float

    @property
    def static_names(self):
        return tuple(STATIC_NAMES[j] for j in self.static_cols)


@dataclass
class Prepared:
    cfg: PipelineConfig
    series: dict
    sites: SiteTable
    graph: GridGraph
    topo: TopoFeatures
    panel: Panel
    samples: SampleIndex
    parts: dict
    test_context: np.ndarray
    state: FeatureState = None
    dropped: tuple = ()

    @property
    def ids(self):
        return self.panel.ids

    def label_dates(self, idx=None) -> np.ndarray:
        s = self.samples if idx is None else self.samples.take(idx)
        return s.label_dates(self.panel)


def split_spec(cfg: PipelineConfig) -> SplitSpec:
    return SplitSpec(tuple(cfg.data.train_years), tuple(cfg.data.val_years), tuple(cfg.data.test_years),
                     tuple(cfg.data.holdout))


def candidate_columns(cfg: PipelineConfig) -> np.ndarray:
    cols = np.arange(len(STATIC_NAMES))
    if not cfg.features.topology:
        cols = np.setdiff1d(cols, TOPOLOGY_COLUMNS)
    return cols


def prepare(series: dict, sites: SiteTable, cfg: PipelineConfig, selected=None) -> Prepared:
    """Filter, align, split and fit feature state on the training partition.

    ``selected`` optionally fixes the static feature names and skips selection.
    """
    if cfg.features.cause:
        warnings.warn("the cause feature group is carried but unused by both models", stacklevel=2)
    kept = filter_substations(list(series.values()), cfg.data.min_days, cfg.data.min_failures)
    ids = tuple(sorted(s.substation_id for s in kept))
    dropped = tuple(sorted(set(series) - set(ids)))
    if dropped:
        log.info("filtered out %d substation(s): %s", len(dropped), ", ".join(dropped))
    if len(ids) < 2:
        raise ValidationError(f"only {len(ids)} substation(s) survive filtering; need at least 2")
    sites = sites.subset(ids)
    graph = build_adjacency(sites.coords, cfg.data.tau_km, ids)
    topo = topo_feature_vector(graph)
    panel = build_panel({s: series[s] for s in ids}, graph.adjacency, ids)
    if not cfg.features.time_counter:
        panel.temporal[:, :, TIME_COUNTER] = 0.0
    samples = panel_samples(panel, cfg.data.lookback)
    spec = split_spec(cfg)
    unknown = sorted(set(spec.holdout) - set(ids))
    if unknown:
        raise ConfigError(f"holdout substation(s) not in the data: {unknown}")
    sub_ids = np.asarray(ids, dtype=object)[samples.sub]
    label_dates = samples.label_dates(panel)
    parts = temporal_split(label_dates, spec, sub_ids)
    years = label_dates.astype("datetime64[Y]").astype(np.int64) + 1970
    test_context = np.flatnonzero(np.isin(years, spec.test_years))
    prep = Prepared(cfg, {s: series[s] for s in ids}, sites, graph, topo, panel, samples, parts,
                    test_context, dropped=dropped)
    check_partitions(prep)
    prep.state = fit_feature_state(prep, parts["train"], selected=selected)
    return prep


def check_partitions(prep: Prepared):
    d = {k: prep.label_dates(v) for k, v in prep.parts.items()}
    assert_no_leakage([("train/val", d["train"], d["val"]), ("val/test", d["val"], d["test"]),
                       ("train/test", d["train"], d["test"])])


def fit_feature_state(prep: Prepared, fit_idx, selected=None, seed=None) -> FeatureState:
    cfg = prep.cfg
    fit = prep.samples.take(fit_idx)
    last_label = prep.panel.date(fit.day.max() + 1).astype(object)
    pool = static_pool(prep.topo, prep.sites, prep.series, last_label)
    cand = candidate_columns(cfg)
    selection = None
    if selected is not None:
        names = list(selected)
        bad = [n for n in names if n not in STATIC_NAMES]
        if bad:
            raise ValidationError(f"unknown static feature(s) {bad}")
        static_cols = np.array([STATIC_NAMES.index(n) for n in names], dtype=np.int64)
    else:
        seed = cfg.stage_seed("select") if seed is None else seed
        selection = select_features(pool[fit.sub][:, cand], fit.label, iters=cfg.features.select_iters,
                                    top_k=cfg.features.top_k, stability=cfg.features.stability,
                                    seed=seed, n_trees=cfg.features.select_trees,
                                    names=[STATIC_NAMES[j] for j in cand])
        static_cols = cand[selection.selected]
    L = cfg.data.lookback
    covered = np.zeros(prep.panel.counts.shape, dtype=bool)
    for k in range(L):
        covered[fit.sub, fit.day - k] = True
    t_rows = prep.panel.temporal[covered]
    fit_subs = np.unique(fit.sub)
    s_rows = pool[fit_subs][:, static_cols]
    if s_rows.shape[0] < 2:
        raise ValidationError("static scaling needs at least 2 training substations")
    scalers = fit_scalers(t_rows, s_rows)
    return FeatureState(pool, static_cols, selection, scalers, float(fit.label.mean()))


# --- ST-GT ------------------------------------------------------------------

def stgt_rowset(prep: Prepared, idx, state: FeatureState = None, target=None) -> RowSet:
    state = state or prep.state
    s = prep.samples.take(idx)
    win = state.scalers.temporal.transform(window_rows(prep.panel, s, prep.cfg.data.lookback))
    st = state.scalers.static.transform(state.pool[s.sub][:, state.static_cols])
    return make_rowset(win, st, s, target)


def augment_rowset(rows: RowSet, state: FeatureState, cfg: PipelineConfig, seed: int):
    """Balance a training row set; returns ``(rows, summary)``."""
    n, L, F = rows.windows.shape
    X = np.concatenate([rows.windows.reshape(n, L * F), rows.static], axis=1)
    cont = np.concatenate([np.tile(TEMPORAL_CONTINUOUS, L), STATIC_CONTINUOUS[state.static_cols]])
    acfg = AugmentConfig(cfg.augment.noise_sigma, cfg.augment.smote_k, cfg.augment.target_ratio, seed)
    aug = balance_to_ratio(X, rows.label, acfg, cont, tags=np.full(n, "train"))
    extra = aug.X[n:]
    out = append_synthetic(rows, extra[:, :L * F].reshape(-1, L, F), extra[:, L * F:], aug.source[n:])
    return out, aug.summary


def model_config(prep: Prepared, state: FeatureState = None) -> ModelConfig:
    cfg = prep.cfg
    state = state or prep.state
    if not cfg.features.temporal:
        raise ConfigError("the transformer needs the temporal feature group")
    m = cfg.model
    return ModelConfig(n_temporal=prep.panel.temporal.shape[2], n_static=len(state.static_cols),
                       n_nodes=prep.panel.n_sub, d=m.d, heads=m.heads, lookback=cfg.data.lookback,
                       n_blocks=m.n_blocks, ff_mult=m.ff_mult, static_hidden=m.static_hidden,
                       head_hidden=tuple(m.head_hidden), mask_mode=m.mask_mode,
                       spatial=cfg.features.spatial)


def train_config(cfg: PipelineConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                       grad_clip_norm=t.grad_clip_norm, lr=t.lr, seed=seed,
                       weighted_sampling=t.weighted_sampling, weight_decay=t.weight_decay)


@dataclass
class ModelRun:
    name: str
    threshold: float
    val_probs: np.ndarray
    val_labels: np.ndarray
    test_probs: np.ndarray
    test_labels: np.ndarray
    report: MetricsReport
    extras: dict = field(default_factory=dict)


def fill_holdout_embeddings(params: ModelParams, prep: Prepared):
    held = [prep.ids.index(s) for s in prep.cfg.data.holdout]
    if not held:
        return
    emb = params["node_emb"].data
    trained = np.setdiff1d(np.arange(emb.shape[0]), held)
    emb[held] = emb[trained].mean(axis=0)


def fit_stgt(prep: Prepared, fit_idx, val_idx, state: FeatureState, seed_tag: str = "stgt", callback=None):
    cfg = prep.cfg
    mcfg = model_config(prep, state)
    lcfg = LossConfig(cfg.loss.alpha, cfg.loss.gamma, state.positive_ratio)
    fit_rows = stgt_rowset(prep, fit_idx, state)
    summary = {}
    if cfg.augment.enabled:
        fit_rows, summary = augment_rowset(fit_rows, state, cfg, cfg.stage_seed(seed_tag + "/augment"))
    val_rows = stgt_rowset(prep, val_idx, state)
    params = init_params(mcfg, cfg.stage_seed(seed_tag + "/init"))
    params, hist = train_loop(params, fit_rows, val_rows, prep.panel.adjacency, mcfg, lcfg,
                              train_config(cfg, cfg.stage_seed(seed_tag + "/train")), callback=callback)
    return params, mcfg, lcfg, hist, summary


def test_rowset(prep: Prepared, state: FeatureState = None) -> RowSet:
    ctx = prep.test_context
    target = np.isin(ctx, prep.parts["test"])
    return stgt_rowset(prep, ctx, state, target=target)


def run_stgt(prep: Prepared, callback=None) -> tuple[ModelRun, ModelParams, ModelConfig]:
    """Train on the training years, pick the threshold on validation, score the test years."""
    cfg = prep.cfg
    params, mcfg, lcfg, hist, summary = fit_stgt(prep, prep.parts["train"], prep.parts["val"],
                                                 prep.state, callback=callback)
    fill_holdout_embeddings(params, prep)
    adj = prep.panel.adjacency
    val_rows = stgt_rowset(prep, prep.parts["val"])
    vp = predict_rows(params, val_rows, mcfg, adj)
    vl = val_rows.label[val_rows.target]
    thr = select_threshold(vp, vl, cfg.eval.f_beta)
    trows = test_rowset(prep)
    tp = predict_rows(params, trows, mcfg, adj)
    tl = trows.label[trows.target]
    rep = evaluate(tp, tl, thr, cfg.eval.boot_iters, cfg.stage_seed("bootstrap/stgt"),
                   synthetic=trows.synthetic[trows.target])
    run = ModelRun("stgt", thr, vp, vl, tp, tl, rep,
                   {"history": {"train_loss": hist.train_loss, "val_loss": hist.val_loss,
                                "best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early},
                    "augmentation": summary, "beta": lcfg.beta})
    return run, params, mcfg


# --- gradient-boosted baseline ----------------------------------------------

def gbt_matrix(prep: Prepared, idx, state: FeatureState = None, spatial: bool | None = None):
    """Design matrix for the boosted-tree baseline and its column names."""
    cfg = prep.cfg
    state = state or prep.state
    spatial = cfg.features.spatial if spatial is None else spatial
    s = prep.samples.take(idx)
    L = cfg.data.lookback
    blocks, names = [], []
    if cfg.features.temporal:
        win = window_rows(prep.panel, s, L)
        blocks.append(win[:, :, 0])
        names += [f"log_count_lag{L - 1 - k}" for k in range(L)]
        blocks.append(win[:, -1, 1:])
        names += list(TEMPORAL_NAMES[1:])
    if spatial:
        counts = prep.panel.counts.astype(np.float64)
        csum = np.concatenate([np.zeros((counts.shape[0], 1)), np.cumsum(counts, axis=1)], axis=1)
        nbr = prep.graph.simple.astype(np.float64)
        for span in NEIGHBOR_SPANS:
            lo = np.maximum(s.day - span + 1, 0)
            own = csum[:, s.day + 1] - csum[:, lo]          # (n_sub, N)
            blocks.append(np.log1p((nbr[s.sub] * own.T).sum(axis=1))[:, None])
            names.append(f"neighbor_log_count_{span}d")
    if len(state.static_cols):
        blocks.append(state.pool[s.sub][:, state.static_cols])
        names += list(state.static_names)
    if not blocks:
        raise ConfigError("no feature group enabled for the boosted-tree baseline")
    return np.concatenate(blocks, axis=1), names


def fit_gbt_model(prep: Prepared, fit_idx, state: FeatureState, seed: int, spatial=None) -> GbtModel:
    g = prep.cfg.gbt
    X, _ = gbt_matrix(prep, fit_idx, state, spatial)
    y = prep.samples.label[fit_idx]
    r = float(y.mean())
    cw = (1 - r) / r if g.class_weighting else None
    return fit_gbt(X, y, max_depth=g.max_depth, learning_rate=g.learning_rate,
                   n_estimators=g.n_estimators, subsample=g.subsample, class_weight=cw, seed=seed)


def run_gbt(prep: Prepared, spatial=None, tag: str = "gbt") -> tuple[ModelRun, GbtModel]:
    cfg = prep.cfg
    model = fit_gbt_model(prep, prep.parts["train"], prep.state, cfg.stage_seed(tag), spatial)
    Xv, _ = gbt_matrix(prep, prep.parts["val"], spatial=spatial)
    Xt, _ = gbt_matrix(prep, prep.parts["test"], spatial=spatial)
    vp, tp = predict_gbt(model, Xv), predict_gbt(model, Xt)
    vl, tl = prep.samples.label[prep.parts["val"]], prep.samples.label[prep.parts["test"]]
    thr = select_threshold(vp, vl, cfg.eval.f_beta)
    rep = evaluate(tp, tl, thr, cfg.eval.boot_iters, cfg.stage_seed("bootstrap/" + tag))
    return ModelRun(tag, thr, vp, vl, tp, tl, rep, {"loss_trace": model.loss_trace}), model


# --- cross-validation -------------------------------------------------------

def cross_validate(prep: Prepared, model: str = "gbt", k: int | None = None) -> list[MetricsReport]:
    """Forward-chaining CV inside the training partition.

    Feature state is refitted on each fold's fit rows. Each fold's threshold is
    chosen on its own holdout block, so these scores describe attainable
    separation rather than an untouched test estimate.
    """
    cfg = prep.cfg
    k = cfg.eval.cv_folds if k is None else k
    train = prep.parts["train"]
    folds = cv_folds(prep.label_dates(train), k)
    assert_no_leakage([(f"fold {i}", prep.label_dates(train[f]), prep.label_dates(train[h]))
                       for i, (f, h) in enumerate(folds)])
    reports = []
    for i, (f, h) in enumerate(folds):
        fit_idx, hold_idx = train[f], train[h]
        selected = prep.state.static_names if prep.state.selection is None else None
        state = fit_feature_state(prep, fit_idx, selected=selected, seed=cfg.stage_seed(f"cv{i}/select"))
        labels = prep.samples.label[hold_idx]
        if model == "gbt":
            m = fit_gbt_model(prep, fit_idx, state, cfg.stage_seed(f"cv{i}/gbt"))
            probs = predict_gbt(m, gbt_matrix(prep, hold_idx, state)[0])
        elif model == "stgt":
            params, mcfg, *_ = fit_stgt(prep, fit_idx, hold_idx, state, seed_tag=f"cv{i}/stgt")
            probs = predict_rows(params, stgt_rowset(prep, hold_idx, state), mcfg, prep.panel.adjacency)
        else:
            raise ConfigError(f"unknown model {model!r}")
        thr = select_threshold(probs, labels, cfg.eval.f_beta)
        reports.append(evaluate(probs, labels, thr, cfg.eval.boot_iters, cfg.stage_seed(f"cv{i}/bootstrap")))
    return reports


# --- exports ----------------------------------------------------------------

def day_batch(prep: Prepared, day: int, state: FeatureState = None):
    """A one-group batch with every substation observed on ``day`` (window end)."""
    idx = np.flatnonzero(prep.samples.day == day)
    if idx.size == 0:
        raise ValidationError(f"no samples end on day {day}")
    rows = stgt_rowset(prep, idx, state)
    units = build_units(rows)
    return rows, assemble_batch(rows, units, prep.panel.adjacency)


def attention_tables(prep: Prepared, params: ModelParams, mcfg: ModelConfig, day: int):
    """Spatial ``B x B`` and temporal ``L x L`` weights for one day as CSV-ready rows."""
    rows, batch = day_batch(prep, day)
    _, w = forward(params, batch, mcfg, keep_weights=True)
    ids = [prep.ids[n] for n in batch.node]
    date = str(prep.panel.date(day))
    members = batch.index[0]
    sp = w["spatial"][0, 0]
    spatial = [{"window_end": date, "query": ids[members[i]], "key": ids[members[j]],
                "adjacent": int(batch.mask[0, i, j]), "weight": repr(float(sp[i, j]))}
               for i in range(members.size) for j in range(members.size)]
    temporal = []
    for b, wt in enumerate(w["temporal"]):
        for r in range(wt.shape[0]):
            for h in range(wt.shape[1]):
                for q in range(wt.shape[2]):
                    for k in range(wt.shape[3]):
                        temporal.append({"window_end": date, "substation": ids[r], "block": b, "head": h,
                                         "query_step": q, "key_step": k, "weight": repr(float(wt[r, h, q, k]))})
    return spatial, temporal


def write_rows_csv(path, rows, fieldnames=None):
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def disturbance_rows(series: dict, sites: SiteTable):
    """Per-substation totals for map-style plots."""
    pos = {s: i for i, s in enumerate(sites.ids)}
    out = []
    for sid in sorted(series):
        s: DailySeries = series[sid]
        i = pos.get(sid)
        out.append({"substation_id": sid,
                    "lat": "" if i is None else repr(float(sites.coords[i, 0])),
                    "lon": "" if i is None else repr(float(sites.coords[i, 1])),
                    "total_failures": s.total, "failure_days": int((s.counts > 0).sum()),
                    "observed_days": s.n_days})
    return out


def prediction_rows(prep: Prepared, run: ModelRun):
    out = []
    for split, idx, probs in (("val", prep.parts["val"], run.val_probs), ("test", prep.parts["test"], run.test_probs)):
        s = prep.samples.take(idx)
        dates = s.label_dates(prep.panel)
        for j in range(len(s)):
            out.append({"substation_id": prep.ids[s.sub[j]], "label_date": str(dates[j]), "split": split,
                        "probability": repr(float(probs[j])), "label": int(s.label[j]), "synthetic": 0})
    return out


def next_day_rows(series: dict, sites: SiteTable, params: ModelParams, mcfg: ModelConfig,
                  scalers: ScalerParams, static_raw: np.ndarray, ids: tuple, adjacency, lookback: int,
                  threshold: float, time_counter: bool = True):
    """Probabilities for the day after each substation's last observed day."""
    missing = [s for s in ids if s not in series]
    if missing:
        raise ValidationError(f"daily series missing for substation(s) {missing}")
    panel = build_panel({s: series[s] for s in ids}, adjacency, ids)
    if not time_counter:
        panel.temporal[:, :, TIME_COUNTER] = 0.0
    last = np.array([np.flatnonzero(panel.observed[i]).max() for i in range(panel.n_sub)])
    out = []
    for day in np.unique(last):
        subs = np.flatnonzero(last == day)
        ok = np.array([panel.observed[s, day - lookback + 1:day + 1].all() and day >= lookback - 1 for s in subs])
        subs = subs[ok]
        if subs.size == 0:
            continue
        s = SampleIndex(subs, np.full(subs.size, day), np.zeros(subs.size, dtype=np.int64))
        win = scalers.temporal.transform(window_rows(panel, s, lookback))
        st = scalers.static.transform(static_raw[subs])
        rows = make_rowset(win, st, s)
        probs = predict_rows(params, rows, mcfg, adjacency)
        for j, sub in enumerate(subs):
            out.append({"substation_id": ids[sub], "window_end": str(panel.date(day)),
                        "target_date": str(panel.date(day + 1)), "probability": repr(float(probs[j])),
                        "alert": int(probs[j] >= threshold)})
    out.sort(key=lambda r: r["substation_id"])
    return out
