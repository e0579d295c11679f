"""Command line entry point: basin graphs, synthetic data, training,
prediction, evaluation, and attention exports.

Commands compose through files only, so any step can be re-run in
isolation. Output lands in a fixed layout under the chosen directory:
graph/, checkpoints/, forecasts/, metrics/, attention/. Progress goes
to standard error as machine-parsable key=value lines. Exit codes:
0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import os

import click
import numpy as np

from . import config as cfgmod
from .data import (WindowDataset, hourly_timestamps, normalize_store,
                   prepare_datasets, split_horizon, store_from_csv,
                   synth_basin, write_series_csv)
from .errors import BasincastError, DivergenceError, UndefinedMetricError
from .evaluation import (dump_attention, evaluate, forecast,
                         write_forecast_csv, write_metrics_csv)
from .figures import (plot_history, plot_hydrographs, plot_lead_curve,
                      plot_spatial_attention, plot_temporal_attention)
from .graph import (build_graph, load_graph, read_catchment_csv,
                    read_esri_ascii, read_targets_csv, save_graph,
                    write_catchment_csv, write_esri_ascii, write_targets_csv)
from .training import checkpoint_load, checkpoint_save, train, write_history_csv

SPLITS = {"train": 0, "val": 1, "test": 2}

_in_path = click.Path(exists=True, dir_okay=False)


def _log(phase: str, **fields) -> None:
    parts = [f"phase={phase}"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    click.echo(" ".join(parts), err=True)


def _outdir(base, *sub) -> str:
    path = os.path.join(base, *sub)
    os.makedirs(path, exist_ok=True)
    return path


@click.group()
def cli() -> None:
    """Spatiotemporal streamflow forecasting over basin graphs."""


# ---------------------------------------------------------------------------
# graph construction and synthetic data
# ---------------------------------------------------------------------------

@cli.command("build-graph")
@click.option("--dem", "dem_path", required=True, type=_in_path,
              help="ESRI ASCII elevation grid.")
@click.option("--targets", "targets_path", required=True, type=_in_path,
              help="CSV of row,col,station_id gauge locations.")
@click.option("--catchments", "catchments_path", type=_in_path,
              help="CSV of src_row,src_col,dst_row,dst_col station pairs.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Output directory.")
def build_graph_cmd(dem_path, targets_path, catchments_path, out_dir):
    """Fill a DEM, route flow, and write the basin graph as JSON."""
    dem = read_esri_ascii(dem_path)
    coords, station_ids = read_targets_csv(targets_path)
    pairs = read_catchment_csv(catchments_path) if catchments_path else []
    graph = build_graph(dem, pairs, coords, station_ids)
    path = os.path.join(_outdir(out_dir, "graph"), "graph.json")
    save_graph(graph, path)
    _log("build-graph", nodes=graph.num_nodes,
         flow_edges=len(graph.flow_edges),
         catchment_edges=len(graph.catchment_edges),
         targets=len(graph.targets), out=path)


@cli.command("synth")
@click.option("--seed", default=0, show_default=True)
@click.option("--rows", required=True, type=int)
@click.option("--cols", required=True, type=int)
@click.option("--horizon", required=True, type=int,
              help="Series length in hours.")
@click.option("--start", default="2000-01-01T00:00", show_default=True,
              help="ISO timestamp of the first sample.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth_cmd(seed, rows, cols, horizon, start, out_dir):
    """Generate a synthetic basin: DEM, gauges, rain and discharge."""
    dem, pairs, target_coords, store = synth_basin(seed, rows, cols, horizon)
    station_ids = ["gauge1", "gauge2", "outlet"]
    graph = build_graph(dem, pairs, target_coords, station_ids)
    os.makedirs(out_dir, exist_ok=True)
    stamps = hourly_timestamps(start, horizon)
    write_esri_ascii(dem, os.path.join(out_dir, "dem.asc"))
    write_targets_csv(target_coords, station_ids,
                      os.path.join(out_dir, "targets.csv"))
    write_catchment_csv(pairs, os.path.join(out_dir, "catchments.csv"))
    write_series_csv(os.path.join(out_dir, "precipitation.csv"), stamps,
                     [str(i) for i in range(store.num_nodes)],
                     store.precipitation)
    write_series_csv(os.path.join(out_dir, "discharge.csv"), stamps,
                     station_ids, store.discharge)
    save_graph(graph, os.path.join(_outdir(out_dir, "graph"), "graph.json"))
    _log("synth", seed=seed, nodes=store.num_nodes, horizon=horizon,
         out=out_dir)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _merge_config(config_path, overrides: dict):
    kv = cfgmod.read_kv(config_path) if config_path else {}
    kv.update({k: str(v) for k, v in overrides.items() if v is not None})
    cfgmod.check_known_keys(kv)
    return (cfgmod.model_config_from_kv(kv), cfgmod.train_config_from_kv(kv),
            cfgmod.eval_options_from_kv(kv))


@cli.command("train")
@click.option("--graph", "graph_path", required=True, type=_in_path)
@click.option("--precip", "precip_path", required=True, type=_in_path)
@click.option("--discharge", "discharge_path", required=True, type=_in_path)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=_in_path,
              help="key=value file; command line flags win.")
@click.option("--epochs", type=int)
@click.option("--batch-size", "batch_size", type=int)
@click.option("--lr", type=float)
@click.option("--weight-decay", "weight_decay", type=float)
@click.option("--patience", type=int)
@click.option("--workers", "num_workers", type=int)
@click.option("--seed", type=int)
@click.option("--executor", type=click.Choice(["process", "serial"]))
@click.option("--check-synchrony", "check_synchrony", is_flag=True,
              default=None, help="Verify replica hashes after every step.")
@click.option("--t-in", "t_in", type=int)
@click.option("--t-out", "t_out", type=int)
@click.option("--d-model", "d_model", type=int)
@click.option("--heads", "num_heads", type=int)
@click.option("--hidden", type=int)
@click.option("--attn-window", "attn_window", type=int)
@click.option("--dropout", type=float)
@click.option("--relations", type=str,
              help="Comma list from {flow, catchment}.")
def train_cmd(graph_path, precip_path, discharge_path, out_dir, config_path,
              **overrides):
    """Train on the first horizon split, validating on the second."""
    mcfg, tcfg, eval_options = _merge_config(config_path, overrides)
    graph = load_graph(graph_path)
    store = store_from_csv(precip_path, discharge_path, graph)
    datasets, norm_state = prepare_datasets(store, mcfg.t_in, mcfg.t_out)
    _log("load", nodes=graph.num_nodes, horizon=store.horizon,
         train_windows=len(datasets[0]), val_windows=len(datasets[1]))
    ckpt_dir = _outdir(out_dir, "checkpoints")
    cfgmod.write_kv(cfgmod.effective_kv(mcfg, tcfg, eval_options),
                    os.path.join(out_dir, "run_config.txt"))

    def on_epoch(row):
        _log("train", epoch=row["epoch"], train_loss=row["train_loss"],
             val_loss=row["val_loss"], seconds=row["seconds"])

    state, history = train(datasets[0], datasets[1], graph, mcfg, tcfg,
                           on_epoch=on_epoch)
    stem = os.path.join(ckpt_dir, "model")
    checkpoint_save(state, norm_state, mcfg, stem)
    write_history_csv(history, os.path.join(ckpt_dir, "history.csv"))
    plot_history(history, os.path.join(ckpt_dir, "history.png"))
    _log("save", checkpoint=stem, epochs_run=len(history),
         best_val=min(row["val_loss"] for row in history))


# ---------------------------------------------------------------------------
# inference and reports
# ---------------------------------------------------------------------------

def _split_dataset(store, norm_state, mcfg, split: str) -> WindowDataset:
    if split not in SPLITS:
        raise BasincastError(f"unknown split {split!r}")
    start, stop = split_horizon(store.horizon)[SPLITS[split]]
    piece = normalize_store(store.slice_time(start, stop), norm_state)
    return WindowDataset(piece, mcfg.t_in, mcfg.t_out, t_offset=start)


def _run_checkpoint(graph_path, precip_path, discharge_path, checkpoint,
                    split, noise_std=0.0, seed=0, capture=False):
    state, norm_state, mcfg = checkpoint_load(checkpoint)
    graph = load_graph(graph_path)
    store = store_from_csv(precip_path, discharge_path, graph)
    ds = _split_dataset(store, norm_state, mcfg, split)
    rng = np.random.default_rng(seed) if noise_std > 0 else None
    frame, observed, summary = forecast(ds, graph, state, mcfg, norm_state,
                                        noise_std=noise_std, rng=rng,
                                        capture_attention=capture)
    _log("forecast", split=split, windows=len(ds),
         steps=int(frame.timesteps.size), noise_std=noise_std)
    return graph, store, frame, observed, summary


def _frame_timestamps(frame, store, start):
    if start is None:
        return None
    full = hourly_timestamps(start, store.horizon)
    return [full[t] for t in frame.timesteps]


_predict_options = [
    click.option("--graph", "graph_path", required=True, type=_in_path),
    click.option("--precip", "precip_path", required=True, type=_in_path),
    click.option("--discharge", "discharge_path", required=True,
                 type=_in_path),
    click.option("--checkpoint", required=True, type=click.Path(),
                 help="Checkpoint stem (without .json/.bin)."),
    click.option("--out", "out_dir", required=True, type=click.Path()),
    click.option("--split", default="test", show_default=True,
                 type=click.Choice(sorted(SPLITS))),
    click.option("--start", default=None,
                 help="ISO timestamp of the series origin, for real dates."),
]


def _with_options(options):
    def wrap(f):
        for option in reversed(options):
            f = option(f)
        return f
    return wrap


@cli.command("predict")
@_with_options(_predict_options)
@click.option("--forecast-noise-std", "noise_std", default=0.0,
              show_default=True,
              help="Gaussian noise added to forecast rain at inference.")
@click.option("--seed", default=0, show_default=True,
              help="Generator seed for forecast-rain noise.")
def predict_cmd(graph_path, precip_path, discharge_path, checkpoint, out_dir,
                split, start, noise_std, seed):
    """Stitch model forecasts over one split into a continuous series."""
    graph, store, frame, observed, _ = _run_checkpoint(
        graph_path, precip_path, discharge_path, checkpoint, split,
        noise_std, seed)
    fc_dir = _outdir(out_dir, "forecasts")
    path = os.path.join(fc_dir, "forecast.csv")
    write_forecast_csv(frame, observed, graph.station_ids, path,
                       _frame_timestamps(frame, store, start))
    figures = plot_hydrographs(frame, observed, graph.station_ids, fc_dir)
    _log("write", forecast=path, figures=len(figures))


@cli.command("evaluate")
@_with_options(_predict_options)
@click.option("--groupings", default="basin,station,lead", show_default=True,
              help="Comma list from {basin, station, lead, year}.")
@click.option("--forecast-noise-std", "noise_std", default=0.0,
              show_default=True)
@click.option("--seed", default=0, show_default=True)
def evaluate_cmd(graph_path, precip_path, discharge_path, checkpoint,
                 out_dir, split, start, groupings, noise_std, seed):
    """Score stitched forecasts and render the report figures."""
    graph, store, frame, observed, _ = _run_checkpoint(
        graph_path, precip_path, discharge_path, checkpoint, split,
        noise_std, seed)
    wanted = tuple(g.strip() for g in groupings.split(",") if g.strip())
    stamps = _frame_timestamps(frame, store, start)
    rows = evaluate(frame, observed, graph.station_ids, wanted, stamps)
    metrics_dir = _outdir(out_dir, "metrics")
    metrics_path = os.path.join(metrics_dir, "metrics.csv")
    write_metrics_csv(rows, metrics_path)
    fc_dir = _outdir(out_dir, "forecasts")
    write_forecast_csv(frame, observed, graph.station_ids,
                       os.path.join(fc_dir, "forecast.csv"), stamps)
    plot_hydrographs(frame, observed, graph.station_ids, fc_dir)
    if any(r["group"] == "lead" for r in rows):
        plot_lead_curve(rows, os.path.join(metrics_dir, "nse_by_lead.png"))
    pooled = next((r for r in rows if r["group"] == "basin"), None)
    summary_fields = {"metrics": metrics_path, "rows": len(rows)}
    if pooled:
        summary_fields.update(nse=pooled["nse"], kge=pooled["kge"])
    _log("write", **summary_fields)


@cli.command("dump-attention")
@_with_options(_predict_options)
@click.option("--stations", default=None,
              help="Comma list of station ids; default every target.")
def dump_attention_cmd(graph_path, precip_path, discharge_path, checkpoint,
                       out_dir, split, start, stations):
    """Export sample-averaged attention maps as CSV and heatmaps."""
    graph, store, frame, observed, summary = _run_checkpoint(
        graph_path, precip_path, discharge_path, checkpoint, split,
        capture=True)
    wanted = None
    if stations is not None:
        wanted = [s.strip() for s in stations.split(",") if s.strip()]
    att_dir = _outdir(out_dir, "attention")
    paths = dump_attention(summary, graph, att_dir, wanted)
    paths += plot_spatial_attention(summary, graph.station_ids, att_dir)
    paths += plot_temporal_attention(summary, graph, att_dir, wanted)
    _log("write", attention=att_dir, files=len(paths))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except (DivergenceError, UndefinedMetricError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except (BasincastError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
