import numpy as np
import pytest
from pydantic import ValidationError

from abmlens.symbolize import (
    AggregationSpec,
    SymbolSequence,
    aggregate_series,
    aggregate_snapshots,
    bin_midpoints,
    discretize,
    load_symbols,
    save_symbols,
)


def test_quantile_splits_at_the_median():
    seq = discretize(np.arange(1.0, 9.0), 2)
    assert seq.symbols == [0, 0, 0, 0, 1, 1, 1, 1]
    assert seq.alphabet_size == 2
    assert seq.scheme_echo["method"] == "quantile"


def test_quantile_ties_fall_to_lower_bin():
    assert discretize([0.0, 1.0, 1.0, 1.0, 2.0], 2).symbols == [0, 0, 0, 0, 1]


def test_uniform_puts_maximum_in_top_bin():
    assert discretize([0.0, 0.25, 0.5, 1.0], 2, "uniform").symbols == [0, 0, 1, 1]


def test_constant_series_is_a_single_symbol():
    assert discretize([3.0] * 5, 4, "uniform").symbols == [0] * 5
    assert discretize([3.0] * 5, 4, "quantile").symbols == [0] * 5


def test_single_bin():
    seq = discretize([0.1, 5.0, -2.0], 1)
    assert seq.symbols == [0, 0, 0]
    assert seq.alphabet_size == 1


def test_non_finite_value_is_reported_by_index():
    with pytest.raises(ValueError, match="index 2"):
        discretize([0.0, 1.0, np.nan], 2)


def test_unknown_method():
    with pytest.raises(ValueError, match="method"):
        discretize([0.0, 1.0], 2, "kmeans")


def test_symbols_must_fit_alphabet():
    with pytest.raises(ValidationError, match="outside alphabet"):
        SymbolSequence(symbols=[0, 2], alphabet_size=2)


def test_bin_midpoints():
    seq = discretize([0.0, 1.0, 2.0, 3.0, 4.0], 2, "uniform")
    np.testing.assert_allclose(bin_midpoints(seq), [1.0, 1.0, 3.0, 3.0, 3.0])


def test_aggregate_series_reducers():
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    np.testing.assert_allclose(aggregate_series(values, AggregationSpec(k=2)), [1.5, 3.5])
    np.testing.assert_allclose(aggregate_series(values, AggregationSpec(k=2, reducer="max")), [2.0, 4.0])
    np.testing.assert_allclose(aggregate_series(values, AggregationSpec(k=2, reducer="last")), [2.0, 4.0])
    np.testing.assert_array_equal(aggregate_series(values, AggregationSpec(k=1)), values)


def test_aggregate_series_block_too_long():
    with pytest.raises(ValueError, match="exceeds series length"):
        aggregate_series([1.0, 2.0], AggregationSpec(k=3))


def test_period_two_averages_to_constant():
    aggregated = aggregate_series([0.0, 1.0] * 10, AggregationSpec(k=2))
    assert set(aggregated.tolist()) == {0.5}


def test_aggregate_snapshots_elementwise(rng):
    stack = rng.random((7, 4, 3))
    aggregated = aggregate_snapshots(stack, AggregationSpec(k=3))
    assert aggregated.shape == (2, 4, 3)
    np.testing.assert_allclose(aggregated[1], stack[3:6].mean(axis=0))


def test_aggregate_snapshots_needs_a_stack():
    with pytest.raises(ValueError, match="identical shape"):
        aggregate_snapshots(np.zeros((4, 3)), AggregationSpec(k=2))


def test_symbols_round_trip(tmp_path):
    seq = discretize([0.3, 0.1, 0.9, 0.5, 0.7], 3)
    save_symbols(seq, tmp_path)
    assert load_symbols(tmp_path) == seq


def test_load_symbols_without_sidecar_infers_alphabet(period2_dir, tmp_path):
    csv = tmp_path / "plain.csv"
    csv.write_text((period2_dir / "symbols.csv").read_text())
    seq = load_symbols(csv)
    assert seq.alphabet_size == 2
    assert len(seq) == 2000


@pytest.mark.parametrize("method", ["quantile", "uniform"])
def test_symbolizing_bin_midpoints_is_stable(method, rng):
    seq = discretize(np.concatenate([[0.0, 1.0], rng.random(998)]), 4, method)
    assert discretize(bin_midpoints(seq), 4, method).symbols == seq.symbols


def test_mean_aggregation_commutes_with_affine_maps(rng):
    values = rng.standard_normal(101)
    spec = AggregationSpec(k=4)
    np.testing.assert_allclose(
        aggregate_series(2.5 * values - 3.0, spec), 2.5 * aggregate_series(values, spec) - 3.0
    )


def test_quantile_bins_are_balanced(rng):
    counts = np.bincount(discretize(rng.standard_normal(1000), 7).symbols, minlength=7)
    assert np.all(np.abs(counts - 1000 / 7) <= 1.0)
