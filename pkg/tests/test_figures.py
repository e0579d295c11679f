"""Tests for the rendered report figures."""

import numpy as np
import pytest

from basincast.data import synth_basin
from basincast.errors import InvalidInputError
from basincast.evaluation import AttentionSummary, stitch
from basincast.figures import (plot_history, plot_hydrographs,
                               plot_lead_curve, plot_spatial_attention,
                               plot_temporal_attention)
from basincast.graph import build_graph

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(8) == PNG_MAGIC


@pytest.fixture(scope="module")
def small_graph():
    dem, pairs, targets, _ = synth_basin(seed=2, rows=3, cols=4, horizon=300)
    return build_graph(dem, pairs, targets, ["g1", "g2", "out"])


def stochastic_summary(heads=2, targets=3, nodes=12, t_in=8, seed=1):
    rng = np.random.default_rng(seed)
    spatial = rng.uniform(0.1, 1.0, size=(heads, targets, targets))
    spatial /= spatial.sum(axis=-1, keepdims=True)
    temporal = rng.uniform(0.1, 1.0, size=(nodes, heads, t_in, t_in))
    temporal /= temporal.sum(axis=-1, keepdims=True)
    return AttentionSummary(temporal, spatial, samples=5)


class TestHistoryFigure:
    def test_renders_png(self, tmp_path):
        history = [{"epoch": e, "train_loss": 1.0 / (e + 1),
                    "val_loss": 1.2 / (e + 1), "seconds": 0.1}
                   for e in range(5)]
        path = plot_history(history, tmp_path / "history.png")
        assert is_png(path)

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(InvalidInputError):
            plot_history([], tmp_path / "history.png")


class TestHydrographs:
    def test_one_file_per_station(self, tmp_path):
        rng = np.random.default_rng(3)
        frame = stitch(rng.uniform(1, 3, size=(6, 2, 4)), np.arange(6))
        observed = rng.uniform(1, 3, size=frame.values.shape)
        paths = plot_hydrographs(frame, observed, ["a", "b"], tmp_path)
        assert [p.split("/")[-1] for p in paths] == \
            ["hydrograph_a.png", "hydrograph_b.png"]
        assert all(is_png(p) for p in paths)


class TestLeadCurve:
    def test_renders_from_lead_rows(self, tmp_path):
        rows = [{"group": "lead", "lead": h, "nse": 0.9 - 0.05 * h,
                 "kge": 0.85 - 0.04 * h} for h in range(1, 5)]
        rows.append({"group": "basin", "lead": "all", "nse": 0.9, "kge": 0.8})
        path = plot_lead_curve(rows, tmp_path / "leads.png")
        assert is_png(path)

    def test_requires_lead_rows(self, tmp_path):
        with pytest.raises(InvalidInputError):
            plot_lead_curve([{"group": "basin", "lead": "all", "nse": 1.0,
                              "kge": 1.0}], tmp_path / "leads.png")


class TestAttentionFigures:
    def test_spatial_heads(self, tmp_path):
        summary = stochastic_summary()
        paths = plot_spatial_attention(summary, ["g1", "g2", "out"], tmp_path)
        assert [p.split("/")[-1] for p in paths] == \
            ["spatial_head0.png", "spatial_head1.png"]
        assert all(is_png(p) for p in paths)

    def test_temporal_default_all_stations(self, tmp_path, small_graph):
        summary = stochastic_summary(nodes=small_graph.num_nodes)
        paths = plot_temporal_attention(summary, small_graph, tmp_path)
        assert len(paths) == len(small_graph.station_ids)
        assert all(is_png(p) for p in paths)

    def test_temporal_subset_and_unknown(self, tmp_path, small_graph):
        summary = stochastic_summary(nodes=small_graph.num_nodes)
        paths = plot_temporal_attention(summary, small_graph, tmp_path,
                                        stations=["g2"])
        assert len(paths) == 1 and paths[0].endswith("temporal_g2.png")
        with pytest.raises(InvalidInputError):
            plot_temporal_attention(summary, small_graph, tmp_path,
                                    stations=["ghost"])
