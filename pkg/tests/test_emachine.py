import math

import numpy as np
import pytest

from abmlens.emachine import (
    AnalysisOptions,
    EpsilonMachine,
    analyze,
    block_entropies,
    check_invariants,
    entropy_rate,
    excess_entropy,
    machine_from_dict,
    machine_to_dict,
    minimality_gap,
    reconstruct,
    sample_machine,
    select_order,
    stationarity_screen,
    statistical_complexity,
)
from abmlens.evals.evaluation_data import (
    FIXTURE_LENGTH,
    GOLDEN_MEAN_COMPLEXITY,
    GOLDEN_MEAN_ENTROPY_RATE,
)
from abmlens.evals.processes import (
    EVEN,
    FAIR_COIN,
    GOLDEN_MEAN,
    PERIOD_TWO,
    SWITCH,
    even_process,
    fair_coin,
    golden_mean,
    period_two,
    switch_process,
)
from abmlens.symbolize import SymbolSequence


@pytest.fixture(scope="module")
def coin_result():
    return analyze(fair_coin(FIXTURE_LENGTH, seed=1))


@pytest.fixture(scope="module")
def period_result():
    return analyze(period_two(FIXTURE_LENGTH))


@pytest.fixture(scope="module")
def golden_result():
    return analyze(golden_mean(FIXTURE_LENGTH, seed=2))


def test_closed_forms_on_known_machines():
    assert entropy_rate(FAIR_COIN) == pytest.approx(1.0)
    assert statistical_complexity(FAIR_COIN) == 0.0
    assert entropy_rate(PERIOD_TWO) == 0.0
    assert statistical_complexity(PERIOD_TWO) == pytest.approx(1.0)
    assert entropy_rate(GOLDEN_MEAN) == pytest.approx(GOLDEN_MEAN_ENTROPY_RATE)
    assert statistical_complexity(GOLDEN_MEAN) == pytest.approx(GOLDEN_MEAN_COMPLEXITY)


def test_fair_coin_has_one_state(coin_result):
    machine, inv = coin_result
    assert machine.n_states == 1
    assert inv.entropy_rate == pytest.approx(1.0, abs=0.02)
    assert inv.statistical_complexity == 0.0
    assert inv.excess_entropy <= 0.05


def test_period_two_has_two_deterministic_states(period_result):
    machine, inv = period_result
    assert machine.n_states == 2
    assert inv.entropy_rate <= 0.01
    assert inv.statistical_complexity == pytest.approx(1.0, abs=0.01)
    assert inv.excess_entropy == pytest.approx(1.0, abs=0.05)


def test_golden_mean_recovers_transition_probabilities(golden_result):
    machine, inv = golden_result
    assert machine.n_states == 2
    assert inv.entropy_rate == pytest.approx(2.0 / 3.0, abs=0.03)
    assert inv.statistical_complexity == pytest.approx(0.918, abs=0.03)
    probs = sorted(prob for edges in machine.transitions.values() for _, prob in edges.values())
    assert probs == pytest.approx([0.5, 0.5, 1.0], abs=0.03)


@pytest.mark.parametrize("name", ["coin_result", "period_result", "golden_result"])
def test_reconstructed_machines_are_unifilar_and_stationary(name, request):
    machine, _ = request.getfixturevalue(name)
    check_invariants(machine)
    pi = machine.pi()
    assert np.max(np.abs(pi @ machine.transition_matrix() - pi)) < 1e-6
    for edges in machine.transitions.values():
        assert sum(prob for _, prob in edges.values()) == pytest.approx(1.0)


@pytest.mark.parametrize(
    "generate, probs",
    [(even_process, [0.5, 0.5, 1.0]), (switch_process, [0.2, 0.5, 0.5, 0.8])],
    ids=["even", "switch"],
)
def test_reconstruction_of_non_markov_sources_is_two_states(generate, probs):
    machine = reconstruct(generate(FIXTURE_LENGTH, seed=6), history_length=3)
    assert machine.n_states == 2
    found = sorted(prob for edges in machine.transitions.values() for _, prob in edges.values())
    assert found == pytest.approx(probs, abs=0.03)
    check_invariants(machine)


@pytest.mark.parametrize("generating", [EVEN, SWITCH], ids=["even", "switch"])
def test_reconstruction_recovers_generating_invariants(generating):
    machine = reconstruct(sample_machine(generating, FIXTURE_LENGTH, seed=8), history_length=3)
    assert entropy_rate(machine) == pytest.approx(entropy_rate(generating), abs=0.03)
    assert statistical_complexity(machine) == pytest.approx(statistical_complexity(generating), abs=0.03)


def test_even_process_never_has_odd_runs_of_ones():
    runs = "".join(str(s) for s in even_process(5000, seed=3).symbols).split("0")
    # Runs at the edges of the sample can be cut short.
    assert all(len(run) % 2 == 0 for run in runs[1:-1])


def test_reconstructed_state_count_is_minimal(golden_result):
    machine, _ = golden_result
    assert machine.metadata["minimality_gap"] == pytest.approx(0.5, abs=0.05)


def test_invariants_do_not_depend_on_symbol_labels():
    seq = golden_mean(FIXTURE_LENGTH, seed=5)
    flipped = SymbolSequence(symbols=[1 - s for s in seq.symbols], alphabet_size=2)
    _, a = analyze(seq)
    _, b = analyze(flipped)
    assert a.entropy_rate == pytest.approx(b.entropy_rate, abs=1e-6)
    assert a.statistical_complexity == pytest.approx(b.statistical_complexity, abs=1e-6)
    assert a.excess_entropy == pytest.approx(b.excess_entropy, abs=1e-6)


def test_resampling_a_reconstructed_machine_reproduces_it(golden_result):
    machine, inv = golden_result
    again, inv_again = analyze(sample_machine(machine, FIXTURE_LENGTH, seed=9))
    assert again.n_states == machine.n_states
    assert inv_again.entropy_rate == pytest.approx(inv.entropy_rate, abs=0.03)


def test_golden_mean_sampler_never_emits_two_ones():
    symbols = "".join(str(s) for s in golden_mean(5000, seed=3).symbols)
    assert "11" not in symbols


def test_select_order():
    assert select_order(period_two(2000), 3) == 1
    assert select_order(fair_coin(5000, seed=4), 3) == 0


def test_select_order_short_sequence():
    with pytest.raises(ValueError, match="too short"):
        select_order(period_two(3), 3)


def test_reconstruct_needs_coverage():
    with pytest.raises(ValueError, match="insufficient data"):
        reconstruct(period_two(100), history_length=3)


def test_reconstruct_rejects_bad_significance():
    with pytest.raises(ValueError, match="significance"):
        reconstruct(period_two(1000), 1, significance=1.5)


def test_constant_sequence_is_one_state_without_structure():
    seq = SymbolSequence(symbols=[0] * 1000, alphabet_size=1)
    machine, inv = analyze(seq)
    assert machine.n_states == 1
    assert inv.entropy_rate == 0.0
    assert inv.statistical_complexity == 0.0
    assert inv.excess_entropy == 0.0


def test_block_entropies_of_period_two():
    entropies = block_entropies(period_two(1000), 3)
    assert entropies[0] == 0.0
    np.testing.assert_allclose(entropies[1:], [1.0, 1.0, 1.0], atol=1e-3)
    assert excess_entropy(period_two(1000), 3) == pytest.approx(1.0, abs=1e-3)


def test_excess_entropy_needs_block_coverage():
    with pytest.raises(ValueError, match="insufficient data"):
        excess_entropy(period_two(100), 4)


def test_stationarity_screen_flags_drift():
    stable = stationarity_screen(period_two(1000))
    drifting = stationarity_screen(SymbolSequence(symbols=[0] * 500 + [1] * 500, alphabet_size=2))
    assert stable > 0.5
    assert drifting < 1e-6


def test_minimality_gap_of_one_state_machine():
    assert minimality_gap(FAIR_COIN) is None


def test_check_invariants_rejects_unnormalized_state():
    broken = EpsilonMachine(
        states=[0],
        transitions={0: {0: (0, 0.5), 1: (0, 0.3)}},
        stationary_dist={0: 1.0},
        alphabet_size=2,
        order_used=0,
    )
    with pytest.raises(ValueError, match="sum to"):
        check_invariants(broken)


def test_machine_dict_round_trip(golden_result):
    machine, inv = golden_result
    payload = machine_to_dict(machine, inv)
    assert payload["invariants"]["entropy_rate"] == inv.entropy_rate
    assert machine_from_dict(payload) == machine


def test_analyze_clamps_order_for_short_sequences():
    machine, _ = analyze(period_two(200), AnalysisOptions(max_order=5))
    assert machine.order_used <= 2
    assert not math.isnan(machine.pi().sum())
