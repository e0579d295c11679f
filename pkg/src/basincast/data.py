"""Time-series ingestion, gap filling, normalization, and windowing.

A SeriesStore holds hourly precipitation for every graph node and
discharge for the gauged target nodes. Model samples are sliding windows
over the store: T_in steps of inputs, then T_out steps of forecast rain
and discharge labels. Feature channels are precipitation, discharge
(zero away from targets), and a binary availability flag marking where
the discharge channel is real.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import (ConstantChannelError, DegenerateRegressionError,
                     InvalidInputError)
from .graph import BasinGraph, DemGrid, d8_flow_direction, fill_depressions

NUM_CHANNELS = 3  # precipitation, discharge, availability


@dataclass
class SeriesStore:
    """Immutable hourly series: precipitation per node, discharge per target."""

    precipitation: np.ndarray
    discharge: np.ndarray
    discharge_mask: np.ndarray
    target_index: tuple

    def __post_init__(self):
        self.precipitation = np.asarray(self.precipitation, dtype=np.float64)
        self.discharge = np.asarray(self.discharge, dtype=np.float64)
        self.discharge_mask = np.asarray(self.discharge_mask, dtype=bool)
        self.target_index = tuple(int(t) for t in self.target_index)
        if self.precipitation.ndim != 2 or self.discharge.ndim != 2:
            raise InvalidInputError("series arrays must be 2-D [rows x horizon]")
        if self.discharge.shape != self.discharge_mask.shape:
            raise InvalidInputError("discharge and its mask must share a shape")
        if self.discharge.shape[0] != len(self.target_index):
            raise InvalidInputError("one discharge row per target required")
        if self.discharge.shape[1] != self.precipitation.shape[1]:
            raise InvalidInputError("precipitation and discharge horizons differ")
        if np.isnan(self.precipitation).any() or (self.precipitation < 0).any():
            raise InvalidInputError("precipitation must be complete and non-negative")

    @property
    def num_nodes(self) -> int:
        return self.precipitation.shape[0]

    @property
    def horizon(self) -> int:
        return self.precipitation.shape[1]

    @property
    def num_targets(self) -> int:
        return len(self.target_index)

    def slice_time(self, start: int, stop: int) -> "SeriesStore":
        return SeriesStore(self.precipitation[:, start:stop],
                           self.discharge[:, start:stop],
                           self.discharge_mask[:, start:stop],
                           self.target_index)


# ---------------------------------------------------------------------------
# gap filling
# ---------------------------------------------------------------------------

def interpolate_downstream(values, mask) -> np.ndarray:
    """Fill missing runs linearly between flanking observations.

    Gaps touching either end clamp to the nearest observed value.
    Observed entries pass through untouched.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.ndim != 1:
        raise InvalidInputError("values and mask must be equal-length 1-D")
    obs = np.nonzero(mask)[0]
    if obs.size == 0:
        raise InvalidInputError("cannot interpolate an all-missing series")
    out = values.copy()
    idx = np.arange(values.size)
    out[~mask] = np.interp(idx[~mask], obs, values[obs])
    return out


def impute_upstream(up, up_mask, down) -> tuple[np.ndarray, float, float]:
    """Fill gaps in an upstream gauge by regressing on a downstream one.

    Fits Q_up = a + b*Q_down over steps where both are observed, then
    substitutes the fit only where the upstream value is missing.
    """
    up = np.asarray(up, dtype=np.float64)
    up_mask = np.asarray(up_mask, dtype=bool)
    down = np.asarray(down, dtype=np.float64)
    if up.shape != up_mask.shape or up.shape != down.shape or up.ndim != 1:
        raise InvalidInputError("series must be equal-length 1-D")
    pairs = up_mask & np.isfinite(down)
    n = int(pairs.sum())
    if n < 2:
        raise DegenerateRegressionError(
            f"need at least 2 concurrent observations, have {n}")
    x, y = down[pairs], up[pairs]
    if np.ptp(x) == 0:
        raise DegenerateRegressionError("downstream series is constant")
    b, a = np.polyfit(x, y, 1)
    out = up.copy()
    out[~up_mask] = a + b * down[~up_mask]
    return out, float(a), float(b)


def clean_discharge(discharge, mask, downstream_of: dict) -> np.ndarray:
    """Complete every gauge series, most-downstream stations first.

    Stations without a downstream partner are linearly interpolated;
    the rest are regressed on their completed partner, falling back to
    interpolation when the regression is degenerate or the partner is
    unavailable (for example on a dependency cycle).
    """
    discharge = np.asarray(discharge, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    num = discharge.shape[0]
    out = np.full_like(discharge, np.nan)
    done = [False] * num

    def interpolated(i):
        return interpolate_downstream(discharge[i], mask[i])

    pending = [i for i in range(num)]
    while pending:
        progress = []
        for i in pending:
            partner = downstream_of.get(i)
            if partner is None:
                out[i] = interpolated(i)
            elif done[partner]:
                if mask[i].all():
                    out[i] = discharge[i]
                else:
                    try:
                        out[i], _, _ = impute_upstream(discharge[i], mask[i],
                                                       out[partner])
                    except DegenerateRegressionError:
                        out[i] = interpolated(i)
            else:
                continue
            done[i] = True
            progress.append(i)
        if not progress:
            # dependency cycle; complete the remainder independently
            for i in pending:
                out[i] = interpolated(i)
                done[i] = True
            break
        pending = [i for i in pending if not done[i]]
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormState:
    """Per-channel min and max of the log-transformed training values."""

    low: dict
    high: dict

    def to_json_dict(self) -> dict:
        return {"low": dict(self.low), "high": dict(self.high)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NormState":
        try:
            return cls({k: float(v) for k, v in doc["low"].items()},
                       {k: float(v) for k, v in doc["high"].items()})
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidInputError(f"malformed normalization state: {exc}")


def normalize(raw, state: NormState | None = None,
              channel: str = "values") -> tuple[np.ndarray, NormState]:
    """Map raw values through log1p then min-max onto [0, 1].

    With no state, fits min/max on `raw` (the training split) and returns
    them; with a state, applies it and clamps spill-over to [0, 1].
    """
    logged = np.log1p(np.maximum(np.asarray(raw, dtype=np.float64), 0.0))
    if state is None:
        low, high = float(logged.min()), float(logged.max())
        if high == low:
            raise ConstantChannelError(
                f"channel {channel!r} is constant, cannot scale")
        state = NormState({channel: low}, {channel: high})
    else:
        if channel not in state.low:
            raise InvalidInputError(f"state has no channel {channel!r}")
        low, high = state.low[channel], state.high[channel]
    out = np.clip((logged - low) / (high - low), 0.0, 1.0)
    return out, state


def denormalize(norm, state: NormState, channel: str = "values") -> np.ndarray:
    """Inverse of `normalize`, floored at zero."""
    if channel not in state.low:
        raise InvalidInputError(f"state has no channel {channel!r}")
    low, high = state.low[channel], state.high[channel]
    values = np.expm1(np.asarray(norm, dtype=np.float64) * (high - low) + low)
    return np.maximum(values, 0.0)


def fit_norm_state(store: SeriesStore) -> NormState:
    """Fit both channel scalers on a training-split store."""
    _, ps = normalize(store.precipitation, channel="precipitation")
    _, ds = normalize(store.discharge, channel="discharge")
    return NormState({**ps.low, **ds.low}, {**ps.high, **ds.high})


def normalize_store(store: SeriesStore, state: NormState) -> SeriesStore:
    precip, _ = normalize(store.precipitation, state, "precipitation")
    disc, _ = normalize(store.discharge, state, "discharge")
    return SeriesStore(precip, disc, store.discharge_mask, store.target_index)


def save_norm_state(state: NormState, path) -> None:
    with open(path, "w") as fh:
        json.dump(state.to_json_dict(), fh, indent=1)
        fh.write("\n")


def load_norm_state(path) -> NormState:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path} is not valid JSON: {exc}")
    return NormState.from_json_dict(doc)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowSample:
    t_start: int
    inputs: np.ndarray        # [num_nodes, T_in, NUM_CHANNELS]
    forecast_rain: np.ndarray  # [num_nodes, T_out]
    labels: np.ndarray        # [num_targets, T_out]


class WindowDataset:
    """All sliding windows of a store, stride one, as stacked arrays."""

    def __init__(self, store: SeriesStore, t_in: int, t_out: int,
                 t_offset: int = 0):
        span = t_in + t_out
        if t_in < 1 or t_out < 1:
            raise InvalidInputError("window lengths must be positive")
        if store.horizon < span:
            raise InvalidInputError(
                f"horizon {store.horizon} is shorter than a {span}-step window")
        count = store.horizon - span + 1
        n, m = store.num_nodes, store.num_targets
        targets = list(store.target_index)

        features = np.zeros((n, store.horizon, NUM_CHANNELS))
        features[:, :, 0] = store.precipitation
        features[targets, :, 1] = store.discharge
        features[targets, :, 2] = 1.0

        # windows view: [count, n, span, channels]
        sliding = np.lib.stride_tricks.sliding_window_view(
            features, span, axis=1)
        sliding = np.moveaxis(sliding, (1, 3, 2), (0, 2, 3))
        self.inputs = np.ascontiguousarray(sliding[:, :, :t_in, :])
        self.forecast_rain = np.ascontiguousarray(sliding[:, :, t_in:, 0])
        label_view = np.lib.stride_tricks.sliding_window_view(
            store.discharge, span, axis=1)
        self.labels = np.ascontiguousarray(
            np.moveaxis(label_view, 1, 0)[:, :, t_in:])
        self.t_start = np.arange(count) + t_offset
        self.t_in, self.t_out = t_in, t_out
        self.num_nodes, self.num_targets = n, m
        self.target_index = tuple(targets)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(int(self.t_start[i]), self.inputs[i],
                            self.forecast_rain[i], self.labels[i])

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(indices)
        return self.inputs[idx], self.forecast_rain[idx], self.labels[idx]


def make_windows(store: SeriesStore, t_in: int, t_out: int) -> WindowDataset:
    return WindowDataset(store, t_in, t_out)


def split_horizon(horizon: int,
                  fractions=(4 / 7, 1 / 7, 2 / 7)) -> list[tuple[int, int]]:
    """Contiguous (start, stop) blocks covering [0, horizon)."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise InvalidInputError("split fractions must be positive and sum to 1")
    edges = [0] + [int(round(horizon * c))
                   for c in np.cumsum(fractions).tolist()]
    edges[-1] = horizon
    blocks = list(zip(edges[:-1], edges[1:]))
    if any(stop <= start for start, stop in blocks):
        raise InvalidInputError(f"horizon {horizon} too short for the split")
    return blocks


def prepare_datasets(store: SeriesStore, t_in: int, t_out: int,
                     fractions=(4 / 7, 1 / 7, 2 / 7)
                     ) -> tuple[list[WindowDataset], NormState]:
    """Split, fit scaling on the first block, window each block separately.

    Windows never straddle a block boundary, so validation and test
    labels stay disjoint from training inputs.
    """
    blocks = split_horizon(store.horizon, fractions)
    train = store.slice_time(*blocks[0])
    state = fit_norm_state(train)
    datasets = []
    for start, stop in blocks:
        piece = normalize_store(store.slice_time(start, stop), state)
        datasets.append(WindowDataset(piece, t_in, t_out, t_offset=start))
    return datasets, state


def sequential_sampler(num_windows: int, num_workers: int,
                       worker_id: int) -> range:
    """Contiguous chunk of window indices owned by one worker.

    Chunks partition [0, num_windows) in worker order; the first
    (num_windows mod num_workers) workers take one extra window.
    """
    if num_workers < 1 or num_workers > num_windows:
        raise InvalidInputError(
            f"need 1 <= workers <= windows, got {num_workers} for {num_windows}")
    if not 0 <= worker_id < num_workers:
        raise InvalidInputError(f"worker_id {worker_id} out of range")
    base, extra = divmod(num_windows, num_workers)
    start = worker_id * base + min(worker_id, extra)
    return range(start, start + base + (1 if worker_id < extra else 0))


# ---------------------------------------------------------------------------
# series CSV
# ---------------------------------------------------------------------------

def hourly_timestamps(start_iso: str, count: int) -> list[str]:
    try:
        start = datetime.fromisoformat(start_iso)
    except ValueError as exc:
        raise InvalidInputError(f"bad timestamp {start_iso!r}: {exc}")
    return [(start + timedelta(hours=i)).isoformat() for i in range(count)]


def write_series_csv(path, timestamps, column_ids, values) -> None:
    """Columns are series ids; NaN cells are written empty."""
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("timestamp," + ",".join(str(c) for c in column_ids) + "\n")
        for t, row in zip(timestamps, values.T):
            cells = ["" if np.isnan(v) else repr(v) for v in row.tolist()]
            fh.write(t + "," + ",".join(cells) + "\n")


def read_series_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (timestamps, column ids, values [columns x time], NaN=missing)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path} is empty")
    header = lines[0].split(",")
    if header[0] != "timestamp" or len(header) < 2:
        raise InvalidInputError(f"{path}: first column must be 'timestamp'")
    ids = [h.strip() for h in header[1:]]
    stamps, rows = [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(header):
            raise InvalidInputError(f"{path}: row has {len(cells)} cells, "
                                    f"expected {len(header)}")
        try:
            datetime.fromisoformat(cells[0])
        except ValueError:
            raise InvalidInputError(f"{path}: bad timestamp {cells[0]!r}")
        stamps.append(cells[0])
        try:
            rows.append([float(c) if c.strip() else np.nan for c in cells[1:]])
        except ValueError:
            raise InvalidInputError(f"{path}: non-numeric value in {ln!r}")
    return stamps, ids, np.array(rows, dtype=np.float64).T


def store_from_csv(precip_path, discharge_path, graph: BasinGraph) -> SeriesStore:
    """Assemble a cleaned store from per-variable CSV files.

    Precipitation columns are node ids covering every graph node;
    discharge columns are station ids matching the graph's targets.
    Missing precipitation is interpolated per node; missing discharge is
    completed downstream-first using the catchment relation.
    """
    _, pids, precip = read_series_csv(precip_path)
    if sorted(pids, key=int) != [str(i) for i in range(graph.num_nodes)]:
        raise InvalidInputError(
            f"precipitation columns must be node ids 0..{graph.num_nodes - 1}")
    order = np.argsort([int(p) for p in pids])
    precip = precip[order]
    for i in range(precip.shape[0]):
        gaps = np.isnan(precip[i])
        if gaps.any():
            precip[i] = interpolate_downstream(precip[i], ~gaps)
    precip = np.maximum(precip, 0.0)

    _, sids, disc = read_series_csv(discharge_path)
    if sorted(sids) != sorted(graph.station_ids):
        raise InvalidInputError("discharge columns must match graph station ids")
    if disc.shape[1] != precip.shape[1]:
        raise InvalidInputError("precipitation and discharge horizons differ")
    disc = disc[[sids.index(s) for s in graph.station_ids]]
    mask = ~np.isnan(disc)

    node_to_row = {node: i for i, node in enumerate(graph.targets)}
    downstream_of = {}
    for u, v in graph.catchment_edges:
        downstream_of.setdefault(node_to_row[u], node_to_row[v])
    cleaned = clean_discharge(disc, mask, downstream_of)
    return SeriesStore(precip, cleaned, mask, graph.targets)


# ---------------------------------------------------------------------------
# synthetic basin
# ---------------------------------------------------------------------------

def linear_reservoir_cascade(rain: np.ndarray, k: np.ndarray,
                             flow_edges) -> np.ndarray:
    """Route rainfall through per-cell linear reservoirs along flow edges.

    Each step: discharge_v = k_v * storage_v, then storage gains rain
    plus upstream discharge and loses its own. Starts from dry storage.
    """
    rain = np.asarray(rain, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, horizon = rain.shape
    src = np.array([u for u, _ in flow_edges], dtype=np.intp)
    dst = np.array([v for _, v in flow_edges], dtype=np.intp)
    storage = np.zeros(n)
    discharge = np.zeros((n, horizon))
    for t in range(horizon):
        outflow = k * storage
        discharge[:, t] = outflow
        inflow = rain[:, t] + np.bincount(dst, weights=outflow[src], minlength=n)
        storage = storage + inflow - outflow
    return discharge


def synth_basin(seed: int, rows: int, cols: int, horizon: int
                ) -> tuple[DemGrid, list, list, SeriesStore]:
    """Deterministic toy basin: DEM, catchment pairs, targets, series.

    The DEM funnels every cell toward a single outlet so that all
    rainfall eventually drains through it. Each upstream gauge heads a
    slow sub-catchment fed by its own storm regime, and discharge comes
    from a per-cell linear reservoir cascade routed along flow edges.
    """
    if rows * cols < 4:
        raise InvalidInputError("grid needs at least 4 cells")
    if horizon < 300:
        raise InvalidInputError("horizon must be at least 300 steps")
    rng = np.random.default_rng(seed)

    outlet = (rows // 2, 0)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dist = np.hypot(rr - outlet[0], cc - outlet[1])
    elev = 10.0 * dist + rng.uniform(0.0, 1.5, size=(rows, cols))
    elev[outlet] = 0.0
    dem = DemGrid(elev, cell_size=1000.0)

    filled = fill_depressions(dem)
    edges = dict(d8_flow_direction(filled))
    ids = filled.node_index_grid()
    coords = filled.node_coords()
    outlet_id = int(ids[outlet])

    # hop distance to the outlet along flow edges
    hops = {}
    for node in range(len(coords)):
        path, cur = [], node
        while cur not in hops and cur in edges:
            path.append(cur)
            cur = edges[cur]
        base = hops.get(cur, 0)
        for back, n in enumerate(reversed(path), start=1):
            hops[n] = base + back

    def path_of(node):
        trail = [node]
        while trail[-1] in edges:
            trail.append(edges[trail[-1]])
        return trail

    # cells draining through each node, the node itself included
    sizes = np.ones(len(coords), dtype=np.int64)
    for node in sorted(hops, key=lambda m: -hops[m]):
        if node in edges:
            sizes[edges[node]] += sizes[node]

    # two gauges at the largest confluences a little above the outlet,
    # on branches whose routes to the outlet share no cell
    gauges = None
    for min_hops in (2, 1):
        cands = [m for m in hops if m != outlet_id and hops[m] >= min_hops]
        cands.sort(key=lambda m: (-sizes[m], hops[m], m))
        for first in cands:
            route = set(path_of(first)) - {outlet_id}
            second = next(
                (m for m in cands if m != first
                 and not (set(path_of(m)) - {outlet_id}) & route), None)
            if second is not None:
                gauges = [first, second]
                break
        if gauges:
            break
    if gauges is None:
        gauges = [m for m in sorted(hops) if m != outlet_id][:2]
    targets = [coords[g] for g in gauges] + [coords[outlet_id]]
    pairs = [(coords[g], coords[outlet_id]) for g in gauges]

    # subcatchment membership: which gauge (if any) each cell drains through
    region = np.full(len(coords), -1)
    for node in range(len(coords)):
        for step in path_of(node):
            if step in gauges:
                region[node] = gauges.index(step)
                break

    # storm regimes: one independent process per gauge region plus a
    # faint basin-wide background so ungauged cells still receive rain
    def storms(length):
        active, intensity, out = 0, 0.0, np.zeros(length)
        for t in range(length):
            if active == 0 and rng.random() < 1 / 48:
                active = 1 + rng.geometric(0.25)
                intensity = rng.lognormal(1.4, 0.5)
            if active > 0:
                out[t] = intensity * rng.uniform(0.6, 1.4)
                active -= 1
        return out

    n = len(coords)
    regimes = [storms(horizon) for _ in range(len(gauges))]
    background = storms(horizon) * 0.08
    cell_gain = rng.uniform(0.7, 1.3, size=n)
    rain = np.zeros((n, horizon))
    for node in range(n):
        base = regimes[region[node]] if region[node] >= 0 else background
        rain[node] = cell_gain[node] * base \
            + rng.normal(0.0, 0.02, size=horizon).clip(min=0.0)

    # slow storage in the gauged headwaters, so a gauge's discharge
    # integrates more rain history than one input window spans; quick
    # response along the remaining route to the outlet
    k = rng.uniform(0.2, 0.3, size=n)
    k[region >= 0] = rng.uniform(0.05, 0.07, size=int((region >= 0).sum()))
    k[outlet_id] = 0.3

    discharge_all = linear_reservoir_cascade(rain, k, list(edges.items()))

    gauge_nodes = gauges + [outlet_id]
    discharge = discharge_all[gauge_nodes]
    store = SeriesStore(rain, discharge,
                        np.ones_like(discharge, dtype=bool),
                        tuple(gauge_nodes))
    return dem, pairs, targets, store
