import numpy as np
import pandas as pd
import pydot
import pytest

from abmlens.emachine import analyze
from abmlens.evals.processes import FAIR_COIN, GOLDEN_MEAN, PERIOD_TWO, golden_mean
from abmlens.regimes import DescriptorVector, FieldStats
from abmlens.report import (
    build_report,
    correlate_axes,
    export_machine_diagram,
    line_plot,
    machine_graph,
    summary_table,
)


def _surface(columns: dict) -> list:
    n = len(next(iter(columns.values())))
    return [
        DescriptorVector(
            theta=float(i),
            replicate_stats={name: FieldStats(mean=float(values[i]), sd=0.0, n=1) for name, values in columns.items()},
        )
        for i in range(n)
    ]


def _dot(path) -> pydot.Dot:
    return pydot.graph_from_dot_data(path.read_text(encoding="utf-8"))[0]


def _edges(path):
    edges = []
    for edge in _dot(path).get_edges():
        symbol, prob = edge.get("label").strip('"').split(" : ")
        edges.append((edge.get_source(), edge.get_destination(), symbol, prob))
    return edges


def _states(path):
    return [n.get_name() for n in _dot(path).get_nodes() if n.get_name() not in ("node", "edge", "graph")]


def test_one_state_machine_has_self_loops(tmp_path):
    export_machine_diagram(FAIR_COIN, tmp_path / "m.dot")
    text = (tmp_path / "m.dot").read_text(encoding="utf-8")
    assert text.startswith("digraph")
    assert _edges(tmp_path / "m.dot") == [("S0", "S0", "0", "0.500"), ("S0", "S0", "1", "0.500")]
    assert "π=1.000" in text


def test_period_two_diagram_has_two_deterministic_edges(tmp_path):
    export_machine_diagram(PERIOD_TWO, tmp_path / "m.dot")
    assert _edges(tmp_path / "m.dot") == [("S0", "S1", "0", "1.000"), ("S1", "S0", "1", "1.000")]
    assert _states(tmp_path / "m.dot") == ["S0", "S1"]


def test_machine_graph_keys_edges_by_symbol():
    graph = machine_graph(GOLDEN_MEAN)
    assert sorted(graph.edges(keys=True)) == [("S0", "S0", 0), ("S0", "S1", 1), ("S1", "S0", 0)]


def test_reconstructed_golden_mean_diagram(tmp_path):
    machine, _ = analyze(golden_mean(20_000, seed=2))
    export_machine_diagram(machine, tmp_path / "m.dot")
    probs = sorted(float(p) for *_, p in _edges(tmp_path / "m.dot"))
    assert probs == pytest.approx([0.5, 0.5, 1.0], abs=0.03)
    assert len(_states(tmp_path / "m.dot")) == GOLDEN_MEAN.n_states


def test_monotone_pair_has_unit_correlation():
    x = np.linspace(0.1, 2.0, 8)
    table = correlate_axes(_surface({"h_mu": x, "effective_dim": np.exp(x)}))
    assert len(table) == 1
    assert table[0].rho == pytest.approx(1.0)
    assert not table[0].degenerate


def test_independent_columns_are_weakly_correlated():
    rng = np.random.Generator(np.random.Philox(50))
    table = correlate_axes(_surface({"c_mu": rng.random(50), "tail_mass": rng.random(50)}))
    assert abs(table[0].rho) < 0.4


def test_constant_column_is_flagged_degenerate():
    table = correlate_axes(_surface({"h_mu": [0.5] * 5, "n_modes": [1, 2, 1, 2, 3]}))
    assert table[0].rho is None
    assert table[0].degenerate


def test_correlation_needs_four_points():
    with pytest.raises(ValueError, match="at least 4"):
        correlate_axes(_surface({"h_mu": [1, 2, 3], "n_modes": [1, 2, 3]}))


def test_summary_table_columns():
    surface = _surface({"h_mu": [0.1, 0.2], "c_mu": [1.0, 1.0], "n_modes": [1, 2]})
    table = summary_table(surface, "mobility")
    assert list(table.columns[:3]) == ["variable", "theta", "scale_k"]
    assert table["h_mu"].tolist() == [0.1, 0.2]
    assert table["effective_dim"].isna().all()


def test_build_report_writes_table_plots_and_correlations(tmp_path):
    x = np.linspace(0.0, 1.0, 6)
    columns = {name: x + i for i, name in enumerate(["h_mu", "c_mu", "excess_entropy", "effective_dim", "n_modes", "mean_score_norm"])}
    surface = _surface(columns)
    written = build_report(surface, tmp_path, "mobility", "caregiver_capacity")
    assert "summary.csv" in written and "correlations.csv" in written
    for field in columns:
        svg = (tmp_path / f"plot_{field}.svg").read_text()
        assert "<svg" in svg
        assert f"{field} vs caregiver_capacity" in svg
    summary = pd.read_csv(tmp_path / "summary.csv", float_precision="round_trip")
    np.testing.assert_array_equal(summary["c_mu"], columns["c_mu"])


def test_plot_skips_non_finite_points():
    fig = line_plot([0, 1, 2], [1.0, float("nan"), 3.0], "t", "x", "y")
    line = fig.axes[0].lines[0]
    assert list(line.get_xdata()) == [0.0, 2.0]
    assert list(line.get_ydata()) == [1.0, 3.0]


def test_plot_rejects_mismatched_lengths():
    with pytest.raises(ValueError, match="equal length"):
        line_plot([0, 1], [1.0], "t", "x", "y")
