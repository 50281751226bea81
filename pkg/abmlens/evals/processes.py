"""Reference stochastic processes with known causal-state structure."""
import numpy as np

from abmlens.emachine import EpsilonMachine, sample_machine
from abmlens.symbolize import SymbolSequence

FAIR_COIN = EpsilonMachine(
    states=[0],
    transitions={0: {0: (0, 0.5), 1: (0, 0.5)}},
    stationary_dist={0: 1.0},
    alphabet_size=2,
    order_used=0,
)

PERIOD_TWO = EpsilonMachine(
    states=[0, 1],
    transitions={0: {0: (1, 1.0)}, 1: {1: (0, 1.0)}},
    stationary_dist={0: 0.5, 1: 0.5},
    alphabet_size=2,
    order_used=1,
)

# No two consecutive 1s.
GOLDEN_MEAN = EpsilonMachine(
    states=[0, 1],
    transitions={0: {0: (0, 0.5), 1: (1, 0.5)}, 1: {0: (0, 1.0)}},
    stationary_dist={0: 2.0 / 3.0, 1: 1.0 / 3.0},
    alphabet_size=2,
    order_used=1,
)

# 1s come in even-length runs; not finite-order Markov.
EVEN = EpsilonMachine(
    states=[0, 1],
    transitions={0: {0: (0, 0.5), 1: (1, 0.5)}, 1: {1: (0, 1.0)}},
    stationary_dist={0: 2.0 / 3.0, 1: 1.0 / 3.0},
    alphabet_size=2,
    order_used=0,
)

# State 1 emits either symbol but always returns to state 0.
SWITCH = EpsilonMachine(
    states=[0, 1],
    transitions={0: {0: (0, 0.5), 1: (1, 0.5)}, 1: {0: (0, 0.2), 1: (0, 0.8)}},
    stationary_dist={0: 2.0 / 3.0, 1: 1.0 / 3.0},
    alphabet_size=2,
    order_used=0,
)


def fair_coin(n: int, seed: int = 0) -> SymbolSequence:
    return sample_machine(FAIR_COIN, n, seed)


def period_two(n: int, phase: int = 0) -> SymbolSequence:
    symbols = (np.arange(n) + phase) % 2
    return SymbolSequence(symbols=symbols.tolist(), alphabet_size=2, scheme_echo={"method": "period_two"})


def golden_mean(n: int, seed: int = 0) -> SymbolSequence:
    return sample_machine(GOLDEN_MEAN, n, seed)


def even_process(n: int, seed: int = 0) -> SymbolSequence:
    return sample_machine(EVEN, n, seed)


def switch_process(n: int, seed: int = 0) -> SymbolSequence:
    return sample_machine(SWITCH, n, seed)
