"""Joint temporal/geometric report over a response surface."""
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib
import networkx as nx
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from pydantic import BaseModel
from scipy.stats import spearmanr

from abmlens.emachine import EpsilonMachine, check_invariants, machine_from_dict
from abmlens.helpers.artifacts import write_csv
from abmlens.regimes import SUMMARY_FIELDS, TEMPORAL_FIELDS, DescriptorVector

logger = logging.getLogger(__name__)

GEOMETRIC_FIELDS = (
    "effective_dim",
    "mean_score_norm",
    "n_modes",
    "tail_mass",
    "kl_to_reference",
    "w1_to_reference",
)


class AxisCorrelation(BaseModel):
    temporal: str
    geometric: str
    rho: Optional[float] = None
    p_value: Optional[float] = None
    degenerate: bool = False


def machine_graph(m: EpsilonMachine) -> nx.MultiDiGraph:
    """States as nodes labelled with pi, one edge per (state, symbol) labelled ``symbol : prob``.

    Labels carry their own DOT quotes; pydot refuses unquoted ids containing a colon.
    """
    graph = nx.MultiDiGraph(name="epsilon_machine")
    graph.graph["graph"] = {"rankdir": "LR"}
    graph.graph["node"] = {"shape": "circle"}
    for state in m.states:
        graph.add_node(f"S{state}", label=f'"S{state} π={m.stationary_dist[state]:.3f}"')
    for state in m.states:
        for symbol, (target, prob) in sorted(m.transitions[state].items()):
            graph.add_edge(f"S{state}", f"S{target}", key=symbol, label=f'"{symbol} : {prob:.3f}"')
    return graph


def export_machine_diagram(m: EpsilonMachine, path) -> None:
    """Write ``m`` as a Graphviz DOT digraph."""
    check_invariants(m)
    dot = nx.nx_pydot.to_pydot(machine_graph(m))
    Path(path).write_text(dot.to_string(), encoding="utf-8")


def line_plot(xs: Sequence[float], ys: Sequence[float], title: str, xlabel: str, ylabel: str) -> Figure:
    """One descriptor against theta; non-finite points are left out."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"xs and ys must be 1-D and of equal length, got {xs.shape} and {ys.shape}")
    keep = np.isfinite(xs) & np.isfinite(ys)
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.subplots()
    ax.plot(xs[keep], ys[keep], marker="o", linewidth=1.5)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def write_line_plot(path, xs, ys, title: str, xlabel: str, ylabel: str) -> None:
    # Text stays text so the SVG is searchable.
    with matplotlib.rc_context({"svg.fonttype": "none"}):
        line_plot(xs, ys, title, xlabel, ylabel).savefig(path, format="svg")


def _column(surface: Sequence[DescriptorVector], field: str) -> Optional[np.ndarray]:
    if not all(field in v.replicate_stats for v in surface):
        return None
    return np.array([v.value(field) for v in surface], dtype=float)


def correlate_axes(
    surface: Sequence[DescriptorVector],
    temporal: Sequence[str] = TEMPORAL_FIELDS,
    geometric: Sequence[str] = GEOMETRIC_FIELDS,
) -> List[AxisCorrelation]:
    """
    Spearman rank correlation between each temporal and each geometric field across theta.

    Fields missing from some vector are skipped. A constant or non-finite
    column gives ``rho=None`` and ``degenerate=True``.
    """
    if len(surface) < 4:
        raise ValueError(f"correlate_axes needs at least 4 surface points, got {len(surface)}")
    table = []
    for t_name in temporal:
        t_values = _column(surface, t_name)
        if t_values is None:
            continue
        for g_name in geometric:
            g_values = _column(surface, g_name)
            if g_values is None:
                continue
            usable = all(np.isfinite(c).all() and np.ptp(c) > 0 for c in (t_values, g_values))
            if not usable:
                table.append(AxisCorrelation(temporal=t_name, geometric=g_name, degenerate=True))
                continue
            rho, p_value = spearmanr(t_values, g_values)
            table.append(
                AxisCorrelation(
                    temporal=t_name,
                    geometric=g_name,
                    rho=float(np.clip(rho, -1.0, 1.0)),
                    p_value=float(p_value),
                )
            )
    return table


def summary_table(surface: Sequence[DescriptorVector], variable: str) -> pd.DataFrame:
    rows = []
    for vector in surface:
        row = {"variable": variable, "theta": vector.theta, "scale_k": vector.scale_k}
        for field in SUMMARY_FIELDS:
            stats = vector.replicate_stats.get(field)
            row[field] = stats.mean if stats else math.nan
        row["n_replicates"] = vector.n_replicates
        row["failures"] = len(vector.failures)
        rows.append(row)
    return pd.DataFrame(rows)


def build_report(surface: Sequence[DescriptorVector], directory, variable: str, param_name: str) -> List[str]:
    """
    Write the two-axis summary, correlations, one SVG plot per summary field and
    one DOT diagram per theta. Returns the written file names.
    """
    directory = Path(directory)
    written = []

    table = summary_table(surface, variable)
    write_csv(table, directory / "summary.csv")
    written.append("summary.csv")

    if len(surface) >= 4:
        correlations = pd.DataFrame([c.model_dump() for c in correlate_axes(surface)])
        write_csv(correlations, directory / "correlations.csv")
        written.append("correlations.csv")
    else:
        logger.warning(f"Only {len(surface)} surface points; correlations skipped")

    for field in SUMMARY_FIELDS:
        name = f"plot_{field}.svg"
        write_line_plot(directory / name, table["theta"], table[field], f"{field} vs {param_name}", param_name, field)
        written.append(name)

    for index, vector in enumerate(surface):
        if vector.machine is None:
            continue
        name = f"machine_{index:03d}.dot"
        export_machine_diagram(machine_from_dict(vector.machine), directory / name)
        written.append(name)

    logger.info(f"Report written to {directory}: {len(written)} files")
    return written
