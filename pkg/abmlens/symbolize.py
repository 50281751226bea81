"""Symbolization of real-valued series and k-block aggregation."""
import logging
from pathlib import Path
from typing import List, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from abmlens.helpers.artifacts import read_json, write_csv, write_json
from abmlens.helpers.table_reader import read_table_with_columns
from abmlens.input_guards import finite_vector, positive_count

logger = logging.getLogger(__name__)

Method = Literal["quantile", "uniform"]
Reducer = Literal["mean", "max", "last"]


class SymbolSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    symbols: List[int]
    alphabet_size: int = Field(ge=1)
    scheme_echo: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _symbols_in_alphabet(self):
        for index, symbol in enumerate(self.symbols):
            if not 0 <= symbol < self.alphabet_size:
                raise ValueError(
                    f"symbol {symbol} at index {index} outside alphabet of size {self.alphabet_size}"
                )
        return self

    def __len__(self) -> int:
        return len(self.symbols)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.symbols, dtype=np.int64)


class AggregationSpec(BaseModel):
    k: int = Field(1, ge=1)
    reducer: Reducer = "mean"


def _quantile_symbols(values: np.ndarray, n_bins: int):
    edges = np.quantile(values, np.linspace(0.0, 1.0, n_bins + 1))
    # side="left" counts edges strictly below a value: ties fall to the lower bin.
    symbols = np.searchsorted(edges[1:-1], values, side="left")
    return symbols, edges


def _uniform_symbols(values: np.ndarray, n_bins: int):
    low, high = float(values.min()), float(values.max())
    edges = np.linspace(low, high, n_bins + 1)
    if high == low:
        return np.zeros(values.size, dtype=np.int64), edges
    width = (high - low) / n_bins
    symbols = np.floor((values - low) / width).astype(np.int64)
    return np.clip(symbols, 0, n_bins - 1), edges


def discretize(series: Sequence[float], n_bins: int, method: Method = "quantile") -> SymbolSequence:
    """
    Bin a real-valued series into symbols ``0..n_bins-1``.

    ``quantile`` uses empirical quantile edges (values equal to an edge go to
    the lower bin); ``uniform`` splits [min, max] into equal widths with the
    maximum in the top bin and a constant series collapsing to symbol 0.
    """
    values = finite_vector(series, "series")
    n_bins = positive_count(n_bins, "n_bins")
    if method == "quantile":
        symbols, edges = _quantile_symbols(values, n_bins)
    elif method == "uniform":
        symbols, edges = _uniform_symbols(values, n_bins)
    else:
        raise ValueError(f"method must be 'quantile' or 'uniform', got {method!r}")

    return SymbolSequence(
        symbols=[int(s) for s in symbols],
        alphabet_size=n_bins,
        scheme_echo={"method": method, "n_bins": n_bins, "edges": [float(e) for e in edges]},
    )


def bin_midpoints(seq: SymbolSequence) -> np.ndarray:
    """Map each symbol back to the midpoint of the bin it came from."""
    edges = np.asarray(seq.scheme_echo["edges"], dtype=float)
    centres = (edges[:-1] + edges[1:]) / 2.0
    return centres[seq.as_array()]


def _reduce_blocks(blocks: np.ndarray, reducer: Reducer) -> np.ndarray:
    if reducer == "mean":
        return blocks.mean(axis=1)
    if reducer == "max":
        return blocks.max(axis=1)
    if reducer == "last":
        return blocks[:, -1].copy()
    raise ValueError(f"reducer must be one of mean, max, last; got {reducer!r}")


def aggregate_series(series: Sequence[float], spec: AggregationSpec) -> np.ndarray:
    """Reduce consecutive blocks of ``spec.k`` values; a trailing partial block is dropped."""
    values = np.asarray(series, dtype=float)
    if spec.k > values.size:
        raise ValueError(f"block length k={spec.k} exceeds series length {values.size}")
    n_blocks = values.size // spec.k
    blocks = values[: n_blocks * spec.k].reshape(n_blocks, spec.k)
    return _reduce_blocks(blocks, spec.reducer)


def aggregate_snapshots(snapshots, spec: AggregationSpec) -> np.ndarray:
    """Elementwise block reduction over a stack of equally shaped matrices."""
    stack = np.asarray(snapshots, dtype=float)
    if stack.ndim != 3:
        raise ValueError(
            f"snapshots must be a list of matrices of identical shape, got array of shape {stack.shape}"
        )
    if spec.k > stack.shape[0]:
        raise ValueError(f"block length k={spec.k} exceeds snapshot count {stack.shape[0]}")
    n_blocks = stack.shape[0] // spec.k
    blocks = stack[: n_blocks * spec.k].reshape(n_blocks, spec.k, *stack.shape[1:])
    return _reduce_blocks(blocks, spec.reducer)


def save_symbols(seq: SymbolSequence, directory) -> None:
    directory = Path(directory)
    write_csv(pd.DataFrame({"symbol": seq.symbols}), directory / "symbols.csv")
    write_json(
        {"alphabet_size": seq.alphabet_size, "scheme": seq.scheme_echo},
        directory / "symbols.json",
    )


def load_symbols(path) -> SymbolSequence:
    """Load from a directory holding ``symbols.csv`` (+ optional ``symbols.json``) or a CSV path."""
    path = Path(path)
    csv_path = path / "symbols.csv" if path.is_dir() else path
    sidecar = csv_path.with_suffix(".json")
    symbols = read_table_with_columns(csv_path, ["symbol"])["symbol"].astype(int).tolist()
    if sidecar.exists():
        meta = read_json(sidecar)
        return SymbolSequence(
            symbols=symbols, alphabet_size=meta["alphabet_size"], scheme_echo=meta["scheme"]
        )
    logger.warning(f"No sidecar next to {csv_path}; inferring alphabet size from the data")
    return SymbolSequence(
        symbols=symbols, alphabet_size=max(symbols, default=0) + 1, scheme_echo={}
    )
