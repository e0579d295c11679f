"""Forecast stitching, hydrological scores, and attention exports.

Overlapping windows are averaged per timestep into one continuous series
per station, always in physical units. Scores follow the standard
hydrological definitions (NSE, KGE in the 2009 form, PBIAS, normalized
RMSE and MAE, MAPE over nonzero observations) and can be grouped per
basin, per station, per forecast lead, or per calendar year.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import denormalize
from .errors import InvalidInputError, UndefinedMetricError
from .model import GraphTensors, forward_batch

METRIC_COLUMNS = ("nse", "kge", "pbias", "nrmse", "nmae", "mape")


@dataclass(frozen=True)
class ForecastFrame:
    """Stitched forecasts plus the raw windows they came from.

    timesteps: absolute step index per reported column, strictly increasing.
    values: [targets, steps] per-timestep mean over contributing windows.
    coverage: contributing window count per step, always >= 1.
    window_preds: [windows, targets, t_out] unstitched forecasts.
    window_t0: absolute step of each window's first forecast entry.
    """

    timesteps: np.ndarray
    values: np.ndarray
    coverage: np.ndarray
    window_preds: np.ndarray
    window_t0: np.ndarray

    @property
    def num_targets(self) -> int:
        return self.values.shape[0]

    @property
    def t_out(self) -> int:
        return self.window_preds.shape[2]


def stitch(window_preds, first_steps) -> ForecastFrame:
    """Average overlapping window forecasts per timestep.

    `window_preds` is [windows, targets, t_out]; `first_steps` gives the
    absolute timestep of each window's first forecast column. Timesteps
    covered by no window are dropped from the frame.
    """
    preds = np.asarray(window_preds, dtype=np.float64)
    t0 = np.asarray(first_steps, dtype=np.int64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise InvalidInputError("need at least one [targets, t_out] window")
    if t0.shape != (preds.shape[0],):
        raise InvalidInputError("one start step required per window")
    count_w, m, t_out = preds.shape
    base = int(t0.min())
    span = int(t0.max()) + t_out - base
    sums = np.zeros((m, span))
    counts = np.zeros(span, dtype=np.int64)
    cols = (t0[:, None] - base) + np.arange(t_out)[None, :]
    np.add.at(counts, cols.ravel(), 1)
    for station in range(m):
        np.add.at(sums[station], cols.ravel(), preds[:, station, :].ravel())
    covered = counts > 0
    values = sums[:, covered] / counts[covered]
    timesteps = base + np.flatnonzero(covered)
    return ForecastFrame(timesteps, values, counts[covered], preds, t0.copy())


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def metrics(pred, obs) -> dict:
    """Score one predicted series against observations.

    Returns nse, kge (with its r / alpha / beta components), pbias,
    nrmse, nmae, mape, and the count of zero observations excluded from
    MAPE. Constant predictions leave the correlation undefined, so the
    KGE family comes back as NaN; constant or zero-mean observations
    raise, because nothing is well defined then.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise InvalidInputError(
            f"length mismatch: {pred.shape[0]} vs {obs.shape[0]}")
    if obs.size < 2:
        raise InvalidInputError("need at least two points to score")
    obar = obs.mean()
    spread = obs - obar
    if not spread.any():
        raise UndefinedMetricError(
            "NSE and KGE are undefined for constant observations")
    if obar == 0.0:
        raise UndefinedMetricError(
            "PBIAS, NRMSE and NMAE are undefined for zero-mean observations")
    err = pred - obs
    sse = float(err @ err)
    svar = float(spread @ spread)
    pbar = pred.mean()
    sigma_o = obs.std()
    sigma_p = pred.std()
    if sigma_p == 0.0:
        r = np.nan
        kge = np.nan
    else:
        r = float((pred - pbar) @ spread / (obs.size * sigma_p * sigma_o))
        kge = 1.0 - np.sqrt((r - 1.0) ** 2 + (sigma_p / sigma_o - 1.0) ** 2
                            + (pbar / obar - 1.0) ** 2)
    nonzero = obs != 0.0
    if not nonzero.any():
        raise UndefinedMetricError(
            "MAPE is undefined when every observation is zero")
    return {
        "nse": 1.0 - sse / svar,
        "kge": float(kge),
        "kge_r": float(r),
        "kge_alpha": float(sigma_p / sigma_o),
        "kge_beta": float(pbar / obar),
        "pbias": float(100.0 * err.sum() / obs.sum()),
        "nrmse": float(np.sqrt(sse / obs.size) / obar),
        "nmae": float(np.abs(err).mean() / obar),
        "mape": float((np.abs(err[nonzero]) / np.abs(obs[nonzero])).mean()),
        "mape_excluded": int(obs.size - nonzero.sum()),
    }


def evaluate(frame: ForecastFrame, observed, station_ids,
             groupings=("basin", "station", "lead"),
             timestamps=None) -> list[dict]:
    """Metric table rows for the requested groupings.

    `observed` is [targets, steps] aligned to `frame.timesteps`. Basin
    rows pool every station's timesteps; a companion basin_mean row
    averages the per-station scores instead. Lead rows score the raw
    windows at one forecast horizon each. Year rows need `timestamps`
    (ISO strings aligned to the frame).
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != frame.values.shape:
        raise InvalidInputError(
            f"observations {observed.shape} do not match forecasts "
            f"{frame.values.shape}")
    known = {"basin", "station", "lead", "year"}
    unknown = set(groupings) - known
    if unknown:
        raise InvalidInputError(f"unknown groupings {sorted(unknown)}")
    station_ids = [str(s) for s in station_ids]
    if len(station_ids) != frame.num_targets:
        raise InvalidInputError("one station id required per target")

    rows = []

    def add(group, station, lead, scores):
        rows.append({"group": group, "station": station, "lead": lead,
                     **scores})

    per_station = []
    if {"basin", "station"} & set(groupings):
        per_station = [metrics(frame.values[i], observed[i])
                       for i in range(frame.num_targets)]
    if "basin" in groupings:
        add("basin", "all", "all",
            metrics(frame.values.ravel(), observed.ravel()))
        mean_scores = {k: float(np.mean([s[k] for s in per_station]))
                       for k in per_station[0]}
        mean_scores["mape_excluded"] = int(
            sum(s["mape_excluded"] for s in per_station))
        add("basin_mean", "all", "all", mean_scores)
    if "station" in groupings:
        for sid, scores in zip(station_ids, per_station):
            add("station", sid, "all", scores)
    if "lead" in groupings:
        position = {int(t): i for i, t in enumerate(frame.timesteps)}
        for lead in range(1, frame.t_out + 1):
            cols = np.array([position[int(t0) + lead - 1]
                             for t0 in frame.window_t0])
            pred = frame.window_preds[:, :, lead - 1].ravel()
            obs = observed[:, cols].T.ravel()
            add("lead", "all", lead, metrics(pred, obs))
    if "year" in groupings:
        if timestamps is None:
            raise InvalidInputError("year grouping needs timestamps")
        if len(timestamps) != frame.timesteps.size:
            raise InvalidInputError("one timestamp required per step")
        years = np.array([str(t)[:4] for t in timestamps])
        for year in sorted(set(years)):
            keep = years == year
            add("year", "all", year,
                metrics(frame.values[:, keep].ravel(),
                        observed[:, keep].ravel()))
    return rows


# ---------------------------------------------------------------------------
# model runners
# ---------------------------------------------------------------------------

@dataclass
class AttentionSummary:
    """Sample-averaged attention maps from a trained model.

    temporal: [nodes, heads, t_in, t_in] encoder attention.
    spatial: [heads, targets, targets] gate attention on catchment edges,
    destination per row, source per column; rows sum to 1.
    samples: window count behind the averages.
    """

    temporal: np.ndarray
    spatial: np.ndarray
    samples: int


def forecast(ds, graph, state, mcfg, norm_state, batch_size: int = 64,
             noise_std: float = 0.0, rng=None,
             capture_attention: bool = False):
    """Run the model over every window and stitch the results.

    Returns (frame, observed, summary): forecasts and aligned
    observations in physical units, plus the attention summary when
    capturing is on (None otherwise).
    """
    if len(ds) == 0:
        raise InvalidInputError("dataset holds no windows")
    gt = graph if isinstance(graph, GraphTensors) else GraphTensors.from_graph(graph)
    preds = []
    temporal_sum, spatial_sum = None, None
    for lo in range(0, len(ds), batch_size):
        x, rain, _ = ds.batch(range(lo, min(lo + batch_size, len(ds))))
        out, record = forward_batch(x, rain, gt, state, mcfg,
                                    capture_attention=capture_attention,
                                    noise_std=noise_std, rng=rng)
        preds.append(out.values)
        if capture_attention:
            if temporal_sum is None:
                temporal_sum = record.temporal.sum(axis=0)
                spatial_sum = record.catchment.sum(axis=0)
            else:
                temporal_sum += record.temporal.sum(axis=0)
                spatial_sum += record.catchment.sum(axis=0)
    pred_norm = np.concatenate(preds, axis=0)
    first_steps = ds.t_start + ds.t_in
    frame = stitch(denormalize(pred_norm, norm_state, "discharge"),
                   first_steps)
    obs_frame = stitch(denormalize(ds.labels, norm_state, "discharge"),
                       first_steps)
    summary = None
    if capture_attention:
        # temporal axes arrive as [nodes, heads, t, t] after the batch sum
        summary = AttentionSummary(temporal_sum / len(ds),
                                   spatial_sum / len(ds), len(ds))
    return frame, obs_frame.values, summary


def temporal_distribution(summary: AttentionSummary, node: int) -> np.ndarray:
    """Head-averaged attention mass of the newest query over past steps."""
    final_row = summary.temporal[node, :, -1, :]
    return final_row.mean(axis=0)


def precip_discharge_lag_correlation(rain, discharge,
                                     max_lag: int) -> np.ndarray:
    """Pearson r between rain at t and discharge at t+lag, per lag.

    Only rain-event timesteps (rain > 0) enter each correlation. Lags
    with fewer than three events, or with a constant series, come back
    as NaN.
    """
    rain = np.asarray(rain, dtype=np.float64).ravel()
    discharge = np.asarray(discharge, dtype=np.float64).ravel()
    if rain.shape != discharge.shape:
        raise InvalidInputError("series lengths differ")
    if max_lag < 0 or rain.size <= max_lag + 2:
        raise InvalidInputError(
            f"series of {rain.size} steps cannot support lag {max_lag}")
    out = np.full(max_lag + 1, np.nan)
    for lag in range(max_lag + 1):
        head = rain[:rain.size - lag]
        events = head > 0
        x = head[events]
        y = discharge[lag:][events]
        if x.size < 3 or x.std() == 0.0 or y.std() == 0.0:
            continue
        out[lag] = float((x - x.mean()) @ (y - y.mean())
                         / (x.size * x.std() * y.std()))
    return out


# ---------------------------------------------------------------------------
# delimited exports
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, float):
        return "nan" if np.isnan(value) else repr(value)
    return str(value)


def write_metrics_csv(rows: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("group,station,lead," + ",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            cells = [str(row["group"]), str(row["station"]),
                     str(row["lead"])]
            cells += [_cell(row[k]) for k in METRIC_COLUMNS]
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    expected = ["group", "station", "lead", *METRIC_COLUMNS]
    if header != expected:
        raise InvalidInputError(f"unexpected metric columns {header}")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = dict(zip(header[:3], cells[:3]))
        row.update({k: float(v) for k, v in zip(METRIC_COLUMNS, cells[3:])})
        rows.append(row)
    return rows


def write_forecast_csv(frame: ForecastFrame, observed, station_ids,
                       path, timestamps=None) -> None:
    """Long-format stitched series: one row per timestep and station."""
    observed = np.asarray(observed, dtype=np.float64)
    station_ids = [str(s) for s in station_ids]
    if timestamps is None:
        timestamps = [str(int(t)) for t in frame.timesteps]
    with open(path, "w") as fh:
        fh.write("timestamp,station,predicted,observed,coverage\n")
        for col, stamp in enumerate(timestamps):
            for i, sid in enumerate(station_ids):
                fh.write(f"{stamp},{sid},{float(frame.values[i, col])!r},"
                         f"{float(observed[i, col])!r},"
                         f"{int(frame.coverage[col])}\n")


def dump_attention(summary: AttentionSummary, graph, out_dir,
                   stations=None) -> list[str]:
    """Write spatial_head{h}.csv per head and temporal_{station}.csv per
    requested station (default: all targets). Returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    ids = list(graph.station_ids)
    if stations is None:
        stations = ids
    unknown = [s for s in stations if s not in ids]
    if unknown:
        raise InvalidInputError(f"unknown stations {unknown}")
    paths = []
    heads = summary.spatial.shape[0]
    for h in range(heads):
        path = os.path.join(out_dir, f"spatial_head{h}.csv")
        with open(path, "w") as fh:
            fh.write("station," + ",".join(ids) + "\n")
            for i, sid in enumerate(ids):
                row = ",".join(repr(v) for v in summary.spatial[h, i].tolist())
                fh.write(f"{sid},{row}\n")
        paths.append(path)
    for sid in stations:
        node = graph.targets[ids.index(sid)]
        dist = temporal_distribution(summary, node)
        path = os.path.join(out_dir, f"temporal_{sid}.csv")
        with open(path, "w") as fh:
            fh.write("steps_back,weight\n")
            for back, w in enumerate(reversed(dist.tolist())):
                fh.write(f"{back},{w!r}\n")
        paths.append(path)
    return paths
