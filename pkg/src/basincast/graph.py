"""Basin graph construction from a gridded DEM.

Nodes are the non-nodata raster cells, numbered densely in row-major
order. Two directed relations connect them: flow edges follow the single
steepest descent among the 8 neighbors of each cell, and catchment edges
link gauged cells according to an ingested relationship table. Every node
additionally belongs to its own message-passing neighborhood; that
self-loop is a convention, not a stored edge.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# neighbor scan order, also the tie-break order for steepest descent
OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


@dataclass
class DemGrid:
    """Row-major elevation raster with a nodata sentinel."""

    elevations: np.ndarray
    cell_size: float
    nodata: float = -9999.0
    xllcorner: float = 0.0
    yllcorner: float = 0.0

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.elevations.ndim != 2 or self.elevations.size == 0:
            raise InvalidInputError("elevations must be a non-empty 2-D array")
        if self.cell_size <= 0:
            raise InvalidInputError(f"cell_size must be positive, got {self.cell_size}")
        values = self.elevations[self.valid_mask()]
        if not np.isfinite(values).all():
            raise InvalidInputError("non-nodata elevations must be finite")

    @property
    def rows(self) -> int:
        return self.elevations.shape[0]

    @property
    def cols(self) -> int:
        return self.elevations.shape[1]

    def valid_mask(self) -> np.ndarray:
        return self.elevations != self.nodata

    def node_index_grid(self) -> np.ndarray:
        """Dense node ids per cell, -1 where nodata."""
        valid = self.valid_mask()
        ids = np.full(self.elevations.shape, -1, dtype=np.int64)
        ids[valid] = np.arange(int(valid.sum()))
        return ids

    def node_coords(self) -> list[tuple[int, int]]:
        rr, cc = np.nonzero(self.valid_mask())
        return list(zip(rr.tolist(), cc.tolist()))


@dataclass(frozen=True)
class BasinGraph:
    """Immutable heterogeneous basin graph over DEM cells."""

    num_nodes: int
    flow_edges: tuple
    catchment_edges: tuple
    targets: tuple
    grid_coords: tuple
    rows: int
    cols: int
    cell_size: float
    station_ids: tuple = ()

    def __post_init__(self):
        if len(self.grid_coords) != self.num_nodes:
            raise InvalidInputError("grid_coords must list every node")
        if self.station_ids and len(self.station_ids) != len(self.targets):
            raise InvalidInputError("station_ids must align with targets")
        seen_src = set()
        for u, v in self.flow_edges:
            if u in seen_src:
                raise InvalidInputError(f"node {u} has multiple flow edges")
            seen_src.add(u)
            (ur, uc), (vr, vc) = self.grid_coords[u], self.grid_coords[v]
            if max(abs(ur - vr), abs(uc - vc)) != 1:
                raise InvalidInputError(f"flow edge {u}->{v} is not 8-adjacent")
        for t in self.targets:
            if not 0 <= t < self.num_nodes:
                raise InvalidInputError(f"target {t} out of range")
        tset = set(self.targets)
        if len(tset) != len(self.targets):
            raise InvalidInputError("duplicate target nodes")
        for u, v in self.catchment_edges:
            if u not in tset or v not in tset:
                raise InvalidInputError(
                    f"catchment edge {u}->{v} endpoint is not a target")
        for name, edges in (("flow", self.flow_edges),
                            ("catchment", self.catchment_edges)):
            if len(set(edges)) != len(edges):
                raise InvalidInputError(f"duplicate {name} edges")

    def target_index(self, node: int) -> int:
        return self.targets.index(node)


def fill_depressions(dem: DemGrid) -> DemGrid:
    """Raise elevations minimally so every cell drains to the border.

    Priority-flood sweep: open cells that already drain (grid border or
    next to nodata), then grow inward from the lowest water level,
    raising each newly reached cell to at least that level. Drain cells
    keep their elevation exactly.
    """
    valid = dem.valid_mask()
    if not valid.any():
        raise InvalidInputError("grid contains no non-nodata cells")
    elev = dem.elevations
    rows, cols = elev.shape

    invalid_padded = np.pad(~valid, 1, constant_values=False)
    near_nodata = np.zeros_like(valid)
    for dr, dc in OFFSETS:
        near_nodata |= invalid_padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
    border = np.zeros_like(valid)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True

    filled = elev.copy()
    closed = ~valid
    heap = []
    tick = itertools.count()
    for r, c in zip(*np.nonzero(valid & (border | near_nodata))):
        heapq.heappush(heap, (elev[r, c], next(tick), int(r), int(c)))
        closed[r, c] = True

    while heap:
        level, _, r, c = heapq.heappop(heap)
        for dr, dc in OFFSETS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not closed[nr, nc]:
                closed[nr, nc] = True
                filled[nr, nc] = max(elev[nr, nc], level)
                heapq.heappush(heap, (filled[nr, nc], next(tick), nr, nc))

    return DemGrid(filled, dem.cell_size, dem.nodata, dem.xllcorner, dem.yllcorner)


def d8_flow_direction(dem: DemGrid) -> list[tuple[int, int]]:
    """Single steepest-descent edge per cell on a depression-filled grid.

    Slope to a neighbor is the elevation drop over cell_size (cardinal)
    or cell_size*sqrt(2) (diagonal). Only strictly positive slopes count;
    ties resolve to the earliest direction in the fixed scan order, which
    is how the slope planes are stacked below.
    """
    elev = dem.elevations
    valid = dem.valid_mask()
    rows, cols = elev.shape
    ids = dem.node_index_grid()

    slopes = np.full((len(OFFSETS), rows, cols), -np.inf)
    for k, (dr, dc) in enumerate(OFFSETS):
        dist = dem.cell_size * (np.sqrt(2.0) if dr and dc else 1.0)
        src = slice(max(0, -dr), rows - max(0, dr)), slice(max(0, -dc), cols - max(0, dc))
        dst = slice(max(0, dr), rows + min(0, dr)), slice(max(0, dc), cols + min(0, dc))
        plane = np.full((rows, cols), -np.inf)
        drop = elev[src] - elev[dst]
        plane[src] = np.where(valid[dst], drop / dist, -np.inf)
        slopes[k] = plane
    slopes[:, ~valid] = -np.inf

    best = slopes.argmax(axis=0)
    has_edge = valid & (slopes.max(axis=0) > 0)
    edges = []
    drs = np.array([o[0] for o in OFFSETS])
    dcs = np.array([o[1] for o in OFFSETS])
    rr, cc = np.nonzero(has_edge)
    k = best[rr, cc]
    for r, c, nr, nc in zip(rr, cc, rr + drs[k], cc + dcs[k]):
        edges.append((int(ids[r, c]), int(ids[nr, nc])))
    return edges


def build_graph(dem: DemGrid,
                catchment_pairs: list[tuple[tuple[int, int], tuple[int, int]]],
                target_coords: list[tuple[int, int]],
                station_ids: list[str] | None = None) -> BasinGraph:
    """Fill the DEM, route flow, and assemble both edge relations.

    Catchment pairs and targets are given as (row, col) grid coordinates;
    every catchment endpoint must also be listed as a target. Duplicate
    catchment pairs collapse to one edge.
    """
    filled = fill_depressions(dem)
    ids = filled.node_index_grid()
    rows, cols = filled.rows, filled.cols

    def node_at(coord, kind):
        r, c = coord
        if not (0 <= r < rows and 0 <= c < cols):
            raise InvalidInputError(f"{kind} coordinate {coord} outside the grid")
        if ids[r, c] < 0:
            raise InvalidInputError(f"{kind} coordinate {coord} is a nodata cell")
        return int(ids[r, c])

    targets = []
    for coord in target_coords:
        node = node_at(coord, "target")
        if node in targets:
            raise InvalidInputError(f"duplicate target at {coord}")
        targets.append(node)
    target_set = set(targets)

    catchment = []
    for src, dst in catchment_pairs:
        u, v = node_at(src, "catchment"), node_at(dst, "catchment")
        if u not in target_set or v not in target_set:
            raise InvalidInputError(
                f"catchment pair {src}->{dst} endpoint is not a target")
        if (u, v) not in catchment:
            catchment.append((u, v))

    if station_ids is None:
        station_ids = [f"node{n}" for n in targets]
    return BasinGraph(
        num_nodes=int(filled.valid_mask().sum()),
        flow_edges=tuple(d8_flow_direction(filled)),
        catchment_edges=tuple(catchment),
        targets=tuple(targets),
        grid_coords=tuple(filled.node_coords()),
        rows=rows, cols=cols, cell_size=filled.cell_size,
        station_ids=tuple(station_ids))


def extract_subgraph(g: BasinGraph, relation: str) -> BasinGraph:
    """Keep only one relation's edges; nodes, targets and self-loops stay."""
    if relation not in ("flow", "catchment"):
        raise InvalidInputError(f"unknown relation {relation!r}")
    return BasinGraph(
        num_nodes=g.num_nodes,
        flow_edges=g.flow_edges if relation == "flow" else (),
        catchment_edges=g.catchment_edges if relation == "catchment" else (),
        targets=g.targets, grid_coords=g.grid_coords,
        rows=g.rows, cols=g.cols, cell_size=g.cell_size,
        station_ids=g.station_ids)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_ESRI_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def read_esri_ascii(path) -> DemGrid:
    """Parse an ESRI ASCII grid; NODATA_value is optional (-9999 default)."""
    header = {}
    values = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in _ESRI_KEYS or key == "nodata_value":
                if len(parts) != 2:
                    raise InvalidInputError(f"malformed header line: {line.strip()!r}")
                header[key] = float(parts[1])
            else:
                try:
                    values.extend(float(p) for p in parts)
                except ValueError:
                    raise InvalidInputError(f"non-numeric grid value in {line.strip()!r}")
    missing = [k for k in _ESRI_KEYS if k not in header]
    if missing:
        raise InvalidInputError(f"missing header fields: {', '.join(missing)}")
    rows, cols = int(header["nrows"]), int(header["ncols"])
    if len(values) != rows * cols:
        raise InvalidInputError(
            f"expected {rows * cols} grid values, found {len(values)}")
    return DemGrid(np.array(values).reshape(rows, cols),
                   cell_size=header["cellsize"],
                   nodata=header.get("nodata_value", -9999.0),
                   xllcorner=header["xllcorner"],
                   yllcorner=header["yllcorner"])


def write_esri_ascii(dem: DemGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"ncols {dem.cols}\n")
        fh.write(f"nrows {dem.rows}\n")
        fh.write(f"xllcorner {dem.xllcorner!r}\n")
        fh.write(f"yllcorner {dem.yllcorner!r}\n")
        fh.write(f"cellsize {dem.cell_size!r}\n")
        fh.write(f"NODATA_value {dem.nodata!r}\n")
        for row in dem.elevations:
            fh.write(" ".join(repr(v) for v in row.tolist()) + "\n")


def _read_csv_rows(path, expected_header):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path} is empty")
    header = [h.strip() for h in lines[0].split(",")]
    if header != list(expected_header):
        raise InvalidInputError(
            f"{path}: expected header {','.join(expected_header)}, got {lines[0]}")
    return [[f.strip() for f in ln.split(",")] for ln in lines[1:]]


def read_catchment_csv(path) -> list:
    """Rows of src_row,src_col,dst_row,dst_col as coordinate pairs."""
    pairs = []
    for row in _read_csv_rows(path, ("src_row", "src_col", "dst_row", "dst_col")):
        if len(row) != 4:
            raise InvalidInputError(f"{path}: bad row {row}")
        sr, sc, dr, dc = (int(v) for v in row)
        pairs.append(((sr, sc), (dr, dc)))
    return pairs


def read_targets_csv(path) -> tuple[list, list]:
    """Rows of row,col,station_id; returns (coords, station ids)."""
    coords, names = [], []
    for row in _read_csv_rows(path, ("row", "col", "station_id")):
        if len(row) != 3:
            raise InvalidInputError(f"{path}: bad row {row}")
        coords.append((int(row[0]), int(row[1])))
        names.append(row[2])
    return coords, names


def write_catchment_csv(pairs: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("src_row,src_col,dst_row,dst_col\n")
        for (sr, sc), (dr, dc) in pairs:
            fh.write(f"{sr},{sc},{dr},{dc}\n")


def write_targets_csv(coords: list, station_ids: list, path) -> None:
    if len(coords) != len(station_ids):
        raise InvalidInputError("one station id required per target")
    with open(path, "w") as fh:
        fh.write("row,col,station_id\n")
        for (r, c), sid in zip(coords, station_ids):
            fh.write(f"{r},{c},{sid}\n")


def graph_to_json_dict(g: BasinGraph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "flow_edges": [list(e) for e in g.flow_edges],
        "catchment_edges": [list(e) for e in g.catchment_edges],
        "targets": list(g.targets),
        "grid": {
            "rows": g.rows,
            "cols": g.cols,
            "cell_size": g.cell_size,
            "coords": [list(c) for c in g.grid_coords],
        },
        "station_ids": list(g.station_ids),
    }


def graph_from_json_dict(doc: dict) -> BasinGraph:
    try:
        grid = doc["grid"]
        return BasinGraph(
            num_nodes=int(doc["num_nodes"]),
            flow_edges=tuple((int(u), int(v)) for u, v in doc["flow_edges"]),
            catchment_edges=tuple((int(u), int(v)) for u, v in doc["catchment_edges"]),
            targets=tuple(int(t) for t in doc["targets"]),
            grid_coords=tuple((int(r), int(c)) for r, c in grid["coords"]),
            rows=int(grid["rows"]), cols=int(grid["cols"]),
            cell_size=float(grid["cell_size"]),
            station_ids=tuple(str(s) for s in doc.get("station_ids", ())))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed graph document: {exc}")


def save_graph(g: BasinGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json_dict(g), fh, indent=1)
        fh.write("\n")


def load_graph(path) -> BasinGraph:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path} is not valid JSON: {exc}")
    return graph_from_json_dict(doc)
