"""Command-line entry point: ``stgt <command> [--config FILE] [--seed N] [--out DIR]``.

Commands read their inputs from ``--out`` (or explicit path flags) and write
their outputs there, so the usual sequence is::

    stgt synth --out run
    stgt ingest --out run
    stgt graph --out run
    stgt featurize --out run
    stgt select --out run
    stgt train-stgt --out run
    stgt train-gbt --out run
    stgt evaluate --out run
    stgt predict --out run

Log verbosity follows the ``STGT_LOG_LEVEL`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import PipelineConfig, dump_config, load_config
from .errors import StgtError, ValidationError
from .features import STATIC_NAMES, ScalerParams
from .graph import build_adjacency, topo_feature_vector, write_edges_csv, write_node_features_csv
from .ingest import (aggregate_daily, filter_substations, read_coords_csv, read_daily_csv, read_events_csv,
                     write_coords_csv, write_daily_csv, write_events_csv)
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, synth_generate
from .train import evaluate, select_threshold, write_metrics_csv, write_metrics_json

log = logging.getLogger("stgt")

FEATURE_GROUPS = ("temporal", "spatial", "topology", "cause")


# --- helpers ----------------------------------------------------------------

def _need(path: Path) -> Path:
    if not path.exists():
        raise ValidationError(f"required input not found: {path}")
    return path


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(_need(path)) as fh:
        return json.load(fh)


def _resolve(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    feats = {g: getattr(args, g) for g in FEATURE_GROUPS if getattr(args, g, None) is not None}
    if feats:
        over["features"] = feats
    if over:
        cfg = cfg.with_overrides(over)
    return cfg


def _record(out: Path, cfg: PipelineConfig, stage: str):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / f"config_{stage}.json")


def _load_inputs(args, out: Path):
    daily = Path(args.daily) if getattr(args, "daily", None) else out / "daily.csv"
    coords = Path(args.coords) if getattr(args, "coords", None) else out / "coords.csv"
    series = {s.substation_id: s for s in read_daily_csv(_need(daily))}
    sites = read_coords_csv(_need(coords))
    return series, sites


def _selected(out: Path):
    path = out / "selected_features.json"
    return _read_json(path)["selected"] if path.exists() else None


def _prepare(args, cfg, out):
    series, sites = _load_inputs(args, out)
    return pl.prepare(series, sites, cfg, selected=_selected(out))


# --- commands ---------------------------------------------------------------

def cmd_synth(args, cfg, out):
    s = cfg.synth
    sc = SynthConfig(n_substations=s.n_substations, years=s.years, seed=cfg.stage_seed("synth"),
                     propagation_strength=s.propagation_strength, base_rate=s.base_rate,
                     seasonal_amplitude=s.seasonal_amplitude, burst_mean=s.burst_mean,
                     frailty_sd=s.frailty_sd, start=s.start, tau=cfg.data.tau_km)
    data = synth_generate(sc)
    write_events_csv(data.events, out / "events.csv")
    write_coords_csv(data.sites, out / "coords.csv")
    _write_json(out / "synth_meta.json", data.metadata())
    log.info("wrote %d events for %d substations", len(data.events), s.n_substations)


def cmd_ingest(args, cfg, out):
    events, rejected = read_events_csv(_need(Path(args.events) if args.events else out / "events.csv"))
    meta = out / "synth_meta.json"
    period = None
    if meta.exists():
        first, last = _read_json(meta)["period"]
        period = (dt.date.fromisoformat(first), dt.date.fromisoformat(last))
    series = aggregate_daily(events, period)
    kept = filter_substations(list(series.values()), cfg.data.min_days, cfg.data.min_failures)
    write_daily_csv(list(series.values()), out / "daily.csv")
    _write_json(out / "ingest_report.json", {
        "events": len(events), "rejected_rows": rejected, "substations": sorted(series),
        "retained": sorted(s.substation_id for s in kept),
        "excluded": sorted(set(series) - {s.substation_id for s in kept})})


def cmd_graph(args, cfg, out):
    series, sites = _load_inputs(args, out)
    prep_ids = sorted(s.substation_id for s in filter_substations(
        list(series.values()), cfg.data.min_days, cfg.data.min_failures))
    sub = sites.subset(prep_ids)
    g = build_adjacency(sub.coords, cfg.data.tau_km, tuple(prep_ids))
    write_edges_csv(g, out / "edges.csv")
    write_node_features_csv(g, topo_feature_vector(g), out / "node_features.csv")
    pl.write_rows_csv(out / "disturbances.csv", pl.disturbance_rows(series, sites))


def cmd_featurize(args, cfg, out):
    prep = _prepare(args, cfg, out)
    rows = []
    for i, sid in enumerate(prep.ids):
        pool = prep.state.pool[i]
        rows.append({"substation_id": sid, **{n: repr(float(v)) for n, v in zip(STATIC_NAMES, pool)}})
    pl.write_rows_csv(out / "static_features.csv", rows, ["substation_id", *STATIC_NAMES])
    split_of = np.full(len(prep.samples), "", dtype=object)
    for k, v in prep.parts.items():
        split_of[v] = k
    dates = prep.label_dates()
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["substation_id", "window_end", "label_date", "label", "split"])
        for j in range(len(prep.samples)):
            w.writerow([prep.ids[prep.samples.sub[j]], str(dates[j] - 1), str(dates[j]),
                        int(prep.samples.label[j]), split_of[j]])
    np.savez(out / "scalers.npz", **prep.state.scalers.to_arrays())


def cmd_select(args, cfg, out):
    series, sites = _load_inputs(args, out)
    prep = pl.prepare(series, sites, cfg)
    sel = prep.state.selection
    sel.write_csv(out / "feature_importance.csv")
    _write_json(out / "selected_features.json", {"selected": list(prep.state.static_names)})


def cmd_train_stgt(args, cfg, out):
    prep = _prepare(args, cfg, out)
    run, params, mcfg = pl.run_stgt(prep)
    state = prep.state
    arrays = {**state.scalers.to_arrays(), "static_cols": state.static_cols,
              "static_raw": state.pool[:, state.static_cols], "adjacency": prep.panel.adjacency}
    meta = {"ids": list(prep.ids), "lookback": cfg.data.lookback, "threshold": run.threshold,
            "time_counter": cfg.features.time_counter,
            "static_names": list(state.static_names), "seed": cfg.seed}
    save_checkpoint(out / "stgt_model.npz", params, mcfg, meta, arrays)
    pl.write_rows_csv(out / "predictions_stgt.csv", pl.prediction_rows(prep, run))
    _write_json(out / "history_stgt.json", {**run.extras["history"], "augmentation": run.extras["augmentation"],
                                           "beta": run.extras["beta"]})
    test_days = np.unique(prep.samples.day[prep.parts["test"]])
    day = int(test_days[len(test_days) // 2])
    spatial, temporal = pl.attention_tables(prep, params, mcfg, day)
    pl.write_rows_csv(out / "attention_spatial.csv", spatial)
    pl.write_rows_csv(out / "attention_temporal.csv", temporal)


def cmd_train_gbt(args, cfg, out):
    prep = _prepare(args, cfg, out)
    run, model = pl.run_gbt(prep)
    (out / "gbt_model.json").write_text(model.to_json())
    pl.write_rows_csv(out / "predictions_gbt.csv", pl.prediction_rows(prep, run))


def _feature_set_label(cfg):
    on = [g for g in FEATURE_GROUPS if getattr(cfg.features, g)]
    return "+".join(on)


def cmd_evaluate(args, cfg, out):
    reports, rows = {}, []
    for model in ("stgt", "gbt"):
        path = out / f"predictions_{model}.csv"
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            data = list(csv.DictReader(fh))
        for col in ("split", "probability", "label", "synthetic"):
            if data and col not in data[0]:
                raise ValidationError(f"{path}: missing column {col!r}")
        get = lambda split, key, typ: np.array([typ(r[key]) for r in data if r["split"] == split])
        vp, vl = get("val", "probability", float), get("val", "label", int)
        tp, tl, ts = get("test", "probability", float), get("test", "label", int), get("test", "synthetic", int)
        thr = select_threshold(vp, vl, cfg.eval.f_beta)
        rep = evaluate(tp, tl, thr, cfg.eval.boot_iters, cfg.stage_seed(f"bootstrap/{model}"), synthetic=ts)
        reports[model] = rep
        rows += rep.rows(model, _feature_set_label(cfg))
    if not reports:
        raise ValidationError(f"no predictions_*.csv files in {out}; run train-stgt or train-gbt first")
    write_metrics_json(out / "metrics.json", reports, {"seed": cfg.seed, "feature_set": _feature_set_label(cfg)})
    write_metrics_csv(out / "metrics.csv", rows)


def cmd_predict(args, cfg, out):
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "stgt_model.npz"
    params, mcfg, meta, arrays = load_checkpoint(_need(ckpt))
    series, sites = _load_inputs(args, out)
    scalers = ScalerParams.from_arrays(arrays)
    rows = pl.next_day_rows(series, sites, params, mcfg, scalers, arrays["static_raw"], tuple(meta["ids"]),
                            arrays["adjacency"], int(meta["lookback"]), float(meta["threshold"]),
                            bool(meta.get("time_counter", True)))
    pl.write_rows_csv(out / "next_day_predictions.csv", rows,
                      ["substation_id", "window_end", "target_date", "probability", "alert"])


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "graph": cmd_graph, "featurize": cmd_featurize,
    "select": cmd_select, "train-stgt": cmd_train_stgt, "train-gbt": cmd_train_gbt,
    "evaluate": cmd_evaluate, "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgt", description="Substation failure prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="YAML or JSON configuration file")
        c.add_argument("--seed", type=int, help="root seed (overrides the config)")
        c.add_argument("--out", default="run", help="working directory for inputs and outputs")
        for g in FEATURE_GROUPS:
            c.add_argument(f"--{g}", dest=g, action="store_true", default=None, help=f"enable the {g} feature group")
            c.add_argument(f"--no-{g}", dest=g, action="store_false", help=f"disable the {g} feature group")
        if name == "ingest":
            c.add_argument("--events", help="event CSV (default OUT/events.csv)")
        if name in ("graph", "featurize", "select", "train-stgt", "train-gbt", "predict"):
            c.add_argument("--daily", help="daily-series CSV (default OUT/daily.csv)")
            c.add_argument("--coords", help="coordinates CSV (default OUT/coords.csv)")
        if name == "predict":
            c.add_argument("--checkpoint", help="model file (default OUT/stgt_model.npz)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STGT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        out = Path(args.out)
        _record(out, cfg, args.command)
        COMMANDS[args.command](args, cfg, out)
    except (StgtError, OSError, KeyError) as exc:
        print(f"stgt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
