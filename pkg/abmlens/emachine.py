"""Causal-state reconstruction and the invariants h_mu, C_mu and E.

Reconstruction follows the CSSR recipe: grow suffix histories one symbol at
a time, merge histories whose next-symbol distributions a chi-squared test
cannot tell apart, then split states until every (state, symbol) pair has a
single successor. Log-likelihoods are kept in nats internally; everything
reported is in bits.
"""
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import chi2_contingency

from abmlens.symbolize import SymbolSequence

logger = logging.getLogger(__name__)

COVERAGE_FACTOR = 50
BLOCK_COVERAGE_FACTOR = 100
MERGE_TV_THRESHOLD = 0.05
POWER_TOLERANCE = 1e-10
POWER_MAX_ITERATIONS = 100_000
STATIONARITY_TOLERANCE = 1e-6
PROBABILITY_TOLERANCE = 1e-9

History = Tuple[int, ...]


class EpsilonMachine(BaseModel):
    states: List[int]
    # state -> symbol -> (next state, probability); only positive-probability edges.
    transitions: Dict[int, Dict[int, Tuple[int, float]]]
    stationary_dist: Dict[int, float]
    alphabet_size: int = Field(ge=1)
    order_used: int = Field(ge=0)
    metadata: dict = Field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def emission_matrix(self) -> np.ndarray:
        emissions = np.zeros((self.n_states, self.alphabet_size))
        for state, edges in self.transitions.items():
            for symbol, (_, prob) in edges.items():
                emissions[state, symbol] = prob
        return emissions

    def transition_matrix(self) -> np.ndarray:
        """State-to-state matrix with symbols marginalized out."""
        matrix = np.zeros((self.n_states, self.n_states))
        for state, edges in self.transitions.items():
            for _, (target, prob) in edges.items():
                matrix[state, target] += prob
        return matrix

    def pi(self) -> np.ndarray:
        return np.array([self.stationary_dist[s] for s in self.states])


class Invariants(BaseModel):
    entropy_rate: float = Field(ge=0.0, allow_inf_nan=False)
    statistical_complexity: float = Field(ge=0.0, allow_inf_nan=False)
    excess_entropy: float = Field(ge=0.0, allow_inf_nan=False)


class AnalysisOptions(BaseModel):
    max_order: int = Field(3, ge=0)
    significance: float = Field(0.01, gt=0.0, lt=1.0)
    max_block: Optional[int] = Field(None, ge=1)
    max_block_cap: int = Field(8, ge=1)


def _entropy_bits(probs: np.ndarray) -> float:
    probs = probs[probs > 0]
    return float(-(probs * np.log2(probs)).sum()) if probs.size else 0.0


def _windows(symbols: np.ndarray, width: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(symbols, width)


def _block_codes(blocks: np.ndarray, alphabet: int) -> np.ndarray:
    powers = alphabet ** np.arange(blocks.shape[1] - 1, -1, -1, dtype=np.int64)
    return blocks.astype(np.int64) @ powers


def _decode(code: int, alphabet: int, length: int) -> History:
    digits = []
    for _ in range(length):
        code, digit = divmod(code, alphabet)
        digits.append(int(digit))
    return tuple(reversed(digits))


def _transition_table(symbols: np.ndarray, alphabet: int, length: int, start: int) -> np.ndarray:
    """(A**length, A) counts of next symbols after each length-``length`` history."""
    windows = _windows(symbols[start - length :], length + 1)
    if length == 0:
        codes = np.zeros(windows.shape[0], dtype=np.int64)
    else:
        codes = _block_codes(windows[:, :length], alphabet)
    joint = codes * alphabet + windows[:, length]
    return np.bincount(joint, minlength=alphabet ** (length + 1)).reshape(
        alphabet**length, alphabet
    ).astype(float)


def _history_counts(symbols: np.ndarray, alphabet: int, length: int) -> Dict[History, np.ndarray]:
    table = _transition_table(symbols, alphabet, length, start=length)
    observed = np.flatnonzero(table.sum(axis=1))
    return {_decode(int(code), alphabet, length): table[code] for code in observed}


# ───────────────────────────────
# Markov order selection
# ───────────────────────────────
def _bic(symbols: np.ndarray, alphabet: int, order: int, max_order: int) -> float:
    table = _transition_table(symbols, alphabet, order, start=max_order)
    n_transitions = symbols.size - max_order
    totals = table.sum(axis=1, keepdims=True)
    positive = table > 0
    log_likelihood = float(
        (table[positive] * np.log(table[positive] / np.broadcast_to(totals, table.shape)[positive])).sum()
    )
    k_free = alphabet**order * (alphabet - 1)
    return -2.0 * log_likelihood + k_free * math.log(n_transitions)


def select_order(seq: SymbolSequence, max_order: int) -> int:
    """Markov order in ``[0, max_order]`` minimizing BIC; ties go to the smaller order."""
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    if len(seq) <= max_order + 1:
        raise ValueError(
            f"sequence of length {len(seq)} too short for max_order={max_order}; "
            f"need at least {max_order + 2} symbols"
        )
    symbols = seq.as_array()
    scores = [_bic(symbols, seq.alphabet_size, order, max_order) for order in range(max_order + 1)]
    best = 0
    for order, score in enumerate(scores):
        if score < scores[best]:
            best = order
    logger.debug(f"BIC scores by order: {scores}")
    return best


# ───────────────────────────────
# Reconstruction
# ───────────────────────────────
def _same_distribution(counts_a: np.ndarray, counts_b: np.ndarray, significance: float) -> bool:
    table = np.vstack([counts_a, counts_b])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2 or (table.sum(axis=1) == 0).any():
        return True
    _, p_value, _, _ = chi2_contingency(table, correction=False)
    return p_value >= significance


def _pooled(histories: List[History], counts: Dict[History, np.ndarray], alphabet: int) -> np.ndarray:
    total = np.zeros(alphabet)
    for history in histories:
        total += counts[history]
    return total


def _grow(
    states: List[List[History]],
    counts: Dict[History, np.ndarray],
    symbols: np.ndarray,
    alphabet: int,
    length: int,
    significance: float,
) -> Tuple[List[List[History]], Dict[History, np.ndarray]]:
    """Place every one-symbol-older extension of the current histories into a slot.

    Slot ``i < len(states)`` continues state ``i``; later slots are new states.
    """
    child_counts = _history_counts(symbols, alphabet, length + 1)
    inherited = [_pooled(state, counts, alphabet) for state in states]
    slots: List[List[History]] = [[] for _ in states]

    def reference(slot: int) -> np.ndarray:
        if slot < len(inherited):
            return inherited[slot]
        return _pooled(slots[slot], child_counts, alphabet)

    for parent, state in enumerate(states):
        for history in state:
            for symbol in range(alphabet):
                child = (symbol,) + history
                if child not in child_counts:
                    continue
                observed = child_counts[child]
                if _same_distribution(observed, reference(parent), significance):
                    slots[parent].append(child)
                    continue
                for other in range(len(slots)):
                    if other != parent and _same_distribution(observed, reference(other), significance):
                        slots[other].append(child)
                        break
                else:
                    slots.append([child])
    return slots, child_counts


def _homogenize(
    symbols: np.ndarray, alphabet: int, history_length: int, significance: float
) -> Tuple[List[List[History]], Dict[History, np.ndarray]]:
    """
    Partition the histories of length ``history_length - 1`` and ``history_length``.

    A state keeps the shorter histories it held one level up next to the longer
    histories that joined it, so the successor of a shorter history can be read
    off exactly as the state of ``history + (symbol,)``.
    """
    counts = _history_counts(symbols, alphabet, 0)
    states: List[List[History]] = [[()]]
    for length in range(history_length - 1):
        slots, counts = _grow(states, counts, symbols, alphabet, length, significance)
        states = [sorted(slot) for slot in slots if slot]
    slots, child_counts = _grow(states, counts, symbols, alphabet, history_length - 1, significance)
    merged = [(states[i] if i < len(states) else []) + slot for i, slot in enumerate(slots)]
    return [sorted(members) for members in merged if members], {**counts, **child_counts}


def _successor(history: History, symbol: int, assignment: Dict[History, int], short: int) -> int:
    # Shorter histories extend exactly; full-length ones have to forget their oldest symbol.
    key = history + (symbol,) if len(history) == short else history[1:] + (symbol,)
    return assignment.get(key, -1)


def _drivers(state: List[History], short: int) -> List[History]:
    """Histories whose successors define the state's transitions."""
    return [h for h in state if len(h) == short] or state


def _emitters(state: List[History], history_length: int) -> List[History]:
    return [h for h in state if len(h) == history_length] or state


def _determinize(
    states: List[List[History]], counts: Dict[History, np.ndarray], alphabet: int, history_length: int
) -> List[List[History]]:
    """
    Split states until their driving histories agree on every defined successor.

    Full-length histories of a split state follow the group holding their
    one-symbol-shorter suffix, or the heaviest group when that suffix lives
    elsewhere.
    """
    short = history_length - 1
    while True:
        assignment = {h: index for index, state in enumerate(states) for h in state}
        refined: List[List[History]] = []
        for state in states:
            drivers = _drivers(state, short)
            groups: List[Tuple[List[int], List[History]]] = []
            for history in sorted(drivers, key=lambda h: (-counts[h].sum(), h)):
                signature = [
                    _successor(history, symbol, assignment, short) if counts[history][symbol] > 0 else -1
                    for symbol in range(alphabet)
                ]
                for group_signature, members in groups:
                    compatible = all(
                        a == -1 or b == -1 or a == b for a, b in zip(signature, group_signature)
                    )
                    if compatible:
                        members.append(history)
                        for symbol, target in enumerate(signature):
                            if target != -1:
                                group_signature[symbol] = target
                        break
                else:
                    groups.append((signature, [history]))
            if len(groups) == 1:
                refined.append(state)
                continue

            split = [list(members) for _, members in groups]
            driving = set(drivers)
            for history in state:
                if history in driving:
                    continue
                home = next((i for i, members in enumerate(split) if history[1:] in members), 0)
                split[home].append(history)
            refined.extend(sorted(members) for members in split)
        if len(refined) == len(states):
            return refined
        states = refined


def _edges(
    states: List[List[History]], counts: Dict[History, np.ndarray], alphabet: int, history_length: int
) -> Dict[int, Dict[int, Tuple[int, float]]]:
    short = history_length - 1
    assignment = {h: index for index, state in enumerate(states) for h in state}
    transitions: Dict[int, Dict[int, Tuple[int, float]]] = {}
    for index, state in enumerate(states):
        pooled = _pooled(_emitters(state, history_length), counts, alphabet)
        drivers = sorted(_drivers(state, short), key=lambda h: (-counts[h].sum(), h))
        driving = set(drivers)
        candidates = drivers + [h for h in state if h not in driving]
        targets = {}
        for symbol in range(alphabet):
            if pooled[symbol] == 0:
                continue
            for history in candidates:
                target = _successor(history, symbol, assignment, short)
                if counts[history][symbol] > 0 and target != -1:
                    targets[symbol] = target
                    break
        # A symbol seen only at the very end of the data has no successor; drop it.
        mass = sum(pooled[symbol] for symbol in targets)
        transitions[index] = {
            symbol: (target, float(pooled[symbol] / mass)) for symbol, target in targets.items()
        }
    return transitions


def _recurrent_states(
    transitions: Dict[int, Dict[int, Tuple[int, float]]], weights: np.ndarray
) -> List[int]:
    """States of the heaviest closed strongly connected component."""
    n = len(weights)
    rows, cols = [], []
    for state, edges in transitions.items():
        for target, _ in edges.values():
            rows.append(state)
            cols.append(target)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=True, connection="strong")

    best_members: List[int] = []
    best_weight = -1.0
    for label in np.unique(labels):
        members = [int(s) for s in np.flatnonzero(labels == label)]
        closed = all(
            labels[target] == label for s in members for target, _ in transitions[s].values()
        )
        if closed and any(transitions[s] for s in members):
            weight = float(weights[members].sum())
            if weight > best_weight:
                best_members, best_weight = members, weight
    return best_members


def _stationary(matrix: np.ndarray) -> np.ndarray:
    # Lazy chain (P + I) / 2 shares pi with P and cannot oscillate on periodic machines.
    lazy = 0.5 * (matrix + np.eye(matrix.shape[0]))
    pi = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    for _ in range(POWER_MAX_ITERATIONS):
        updated = pi @ lazy
        updated /= updated.sum()
        if np.max(np.abs(updated - pi)) < POWER_TOLERANCE:
            return updated
        pi = updated
    logger.warning("Power iteration hit the iteration cap before converging")
    return pi


def minimality_gap(machine: EpsilonMachine) -> Optional[float]:
    """Smallest total-variation distance between two states' emission distributions."""
    emissions = machine.emission_matrix()
    gaps = [
        0.5 * float(np.abs(emissions[i] - emissions[j]).sum())
        for i in range(machine.n_states)
        for j in range(i + 1, machine.n_states)
    ]
    return min(gaps) if gaps else None


def check_invariants(machine: EpsilonMachine) -> None:
    """Raise ``ValueError`` if unifilarity, normalization or stationarity fails."""
    for state in machine.states:
        edges = machine.transitions.get(state, {})
        # Dict keys make (state, symbol) -> next unique; check the targets exist.
        for symbol, (target, prob) in edges.items():
            if target not in machine.states or not 0 < prob <= 1 + PROBABILITY_TOLERANCE:
                raise ValueError(f"invalid edge ({state}, {symbol}) -> ({target}, {prob})")
        total = sum(prob for _, prob in edges.values())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"outgoing probabilities of state {state} sum to {total}")
    pi = machine.pi()
    if abs(pi.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise ValueError(f"stationary distribution sums to {pi.sum()}")
    residual = float(np.max(np.abs(pi @ machine.transition_matrix() - pi)))
    if residual >= STATIONARITY_TOLERANCE:
        raise ValueError(f"stationary residual {residual} exceeds {STATIONARITY_TOLERANCE}")


def reconstruct(seq: SymbolSequence, history_length: int, significance: float = 0.01) -> EpsilonMachine:
    """
    Reconstruct a minimal unifilar machine from ``seq``.

    Args:
    - seq: symbol sequence with alphabet size A.
    - history_length: longest suffix history L used (>= 1).
    - significance: chi-squared level at which two histories are told apart.

    Returns:
    - An ``EpsilonMachine`` restricted to its recurrent component; the number
      of pruned transient states is in ``metadata["pruned_transient"]``.
    """
    alphabet = seq.alphabet_size
    if history_length < 1:
        raise ValueError(f"history_length must be >= 1, got {history_length}")
    if not 0 < significance < 1:
        raise ValueError(f"significance must lie in (0, 1), got {significance}")
    required = COVERAGE_FACTOR * alphabet**history_length
    if len(seq) < required:
        raise ValueError(
            f"insufficient data: history_length={history_length} with alphabet {alphabet} "
            f"needs at least {required} symbols, got {len(seq)}"
        )

    symbols = seq.as_array()
    states, counts = _homogenize(symbols, alphabet, history_length, significance)
    states = _determinize(states, counts, alphabet, history_length)
    transitions = _edges(states, counts, alphabet, history_length)

    weights = np.array(
        [_pooled(_emitters(state, history_length), counts, alphabet).sum() for state in states]
    )
    recurrent = _recurrent_states(transitions, weights)
    # States made only of shorter histories have no incoming edges and are never counted.
    pruned = sum(
        1
        for s, state in enumerate(states)
        if s not in recurrent and any(len(h) == history_length for h in state)
    )
    if pruned:
        logger.warning(f"Pruned {pruned} transient state(s) from the reconstructed machine")

    order = sorted(recurrent, key=lambda s: states[s][0])
    renumber = {old: new for new, old in enumerate(order)}
    kept = {
        renumber[s]: {
            symbol: (renumber[target], prob) for symbol, (target, prob) in transitions[s].items()
        }
        for s in order
    }
    machine = EpsilonMachine(
        states=list(range(len(order))),
        transitions=kept,
        stationary_dist={},
        alphabet_size=alphabet,
        order_used=history_length,
        metadata={
            "pruned_transient": pruned,
            "significance": significance,
            "histories_per_state": [len(states[s]) for s in order],
        },
    )
    pi = _stationary(machine.transition_matrix())
    machine.stationary_dist = {s: float(p) for s, p in zip(machine.states, pi)}

    gap = minimality_gap(machine)
    machine.metadata["minimality_gap"] = gap
    if gap is not None and gap < MERGE_TV_THRESHOLD:
        logger.warning(
            f"Two causal states have emission distributions within TV {gap:.4f}; "
            "they differ only in successor structure"
        )
    check_invariants(machine)
    return machine


# ───────────────────────────────
# Invariants
# ───────────────────────────────
def entropy_rate(m: EpsilonMachine) -> float:
    """h_mu in bits per symbol."""
    pi = m.pi()
    emissions = m.emission_matrix()
    return float(sum(pi[s] * _entropy_bits(emissions[s]) for s in range(m.n_states)))


def statistical_complexity(m: EpsilonMachine) -> float:
    """C_mu in bits."""
    return _entropy_bits(m.pi())


def block_entropies(seq: SymbolSequence, max_block: int) -> np.ndarray:
    """Empirical Shannon entropy H(L), in bits, of overlapping blocks for L = 0..max_block."""
    symbols = seq.as_array()
    entropies = [0.0]
    for length in range(1, max_block + 1):
        codes = _block_codes(_windows(symbols, length), seq.alphabet_size)
        _, freq = np.unique(codes, return_counts=True)
        entropies.append(_entropy_bits(freq / freq.sum()))
    return np.array(entropies)


def excess_entropy(seq: SymbolSequence, max_block: int) -> float:
    """E from block-entropy convergence, clamped at 0, in bits."""
    if max_block < 1:
        raise ValueError(f"max_block must be >= 1, got {max_block}")
    required = BLOCK_COVERAGE_FACTOR * seq.alphabet_size**max_block
    if len(seq) < required:
        raise ValueError(
            f"insufficient data: max_block={max_block} needs at least {required} symbols, got {len(seq)}"
        )
    entropies = block_entropies(seq, max_block)
    h_estimate = entropies[max_block] - entropies[max_block - 1]
    lengths = np.arange(max_block + 1)
    return max(float(np.max(entropies - lengths * h_estimate)), 0.0)


def stationarity_screen(seq: SymbolSequence) -> Optional[float]:
    """p-value of a chi-squared test between first- and second-half symbol histograms."""
    symbols = seq.as_array()
    half = symbols.size // 2
    if half == 0:
        return None
    table = np.vstack(
        [
            np.bincount(symbols[:half], minlength=seq.alphabet_size),
            np.bincount(symbols[half:], minlength=seq.alphabet_size),
        ]
    )
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 1.0
    _, p_value, _, _ = chi2_contingency(table, correction=False)
    return float(p_value)


def default_max_block(length: int, alphabet: int, cap: int) -> int:
    block = 1
    while block < cap and length >= BLOCK_COVERAGE_FACTOR * alphabet ** (block + 1):
        block += 1
    return block


def analyze(
    seq: SymbolSequence, opts: Optional[AnalysisOptions] = None
) -> Tuple[EpsilonMachine, Invariants]:
    """Order selection, reconstruction and the three invariants for one sequence."""
    opts = opts or AnalysisOptions()
    alphabet = seq.alphabet_size
    max_order = min(opts.max_order, max(len(seq) - 2, 0))
    order = select_order(seq, max_order) if len(seq) > max_order + 1 else 0

    history_length = max(order, 1)
    while history_length > 1 and len(seq) < COVERAGE_FACTOR * alphabet**history_length:
        history_length -= 1
    if history_length < order:
        logger.warning(f"BIC order {order} capped to history length {history_length} by coverage")

    try:
        machine = reconstruct(seq, history_length, opts.significance)
    except ValueError as e:
        logger.error(f"Error reconstructing machine: {str(e)}")
        raise

    p_value = stationarity_screen(seq)
    machine.metadata["bic_order"] = order
    machine.metadata["stationarity_p"] = p_value
    if p_value is not None and p_value < opts.significance:
        logger.warning(
            f"Symbol histograms of the two halves differ (p={p_value:.3g}); "
            "the sequence may not be stationary"
        )

    max_block = opts.max_block or default_max_block(len(seq), alphabet, opts.max_block_cap)
    invariants = Invariants(
        entropy_rate=entropy_rate(machine),
        statistical_complexity=statistical_complexity(machine),
        excess_entropy=excess_entropy(seq, max_block),
    )
    return machine, invariants


# ───────────────────────────────
# Generation and serialization
# ───────────────────────────────
def sample_machine(machine: EpsilonMachine, n: int, seed: int = 0) -> SymbolSequence:
    """Emit ``n`` symbols from a unifilar machine, starting in a stationary draw."""
    rng = np.random.Generator(np.random.Philox(seed))
    emissions = machine.emission_matrix()
    state = int(rng.choice(machine.n_states, p=machine.pi()))
    draws = rng.random(n)
    cumulative = np.cumsum(emissions, axis=1)
    symbols = np.empty(n, dtype=np.int64)
    for i in range(n):
        symbol = int(np.searchsorted(cumulative[state], draws[i], side="right"))
        symbol = min(symbol, machine.alphabet_size - 1)
        while emissions[state, symbol] == 0:
            symbol -= 1
        symbols[i] = symbol
        state = machine.transitions[state][symbol][0]
    return SymbolSequence(
        symbols=symbols.tolist(),
        alphabet_size=machine.alphabet_size,
        scheme_echo={"method": "machine", "seed": seed},
    )


def machine_to_dict(machine: EpsilonMachine, invariants: Optional[Invariants] = None) -> dict:
    payload = {
        "states": machine.states,
        "alphabet": list(range(machine.alphabet_size)),
        "order_used": machine.order_used,
        "transitions": [
            [state, symbol, target, prob]
            for state in machine.states
            for symbol, (target, prob) in sorted(machine.transitions[state].items())
        ],
        "stationary": [machine.stationary_dist[s] for s in machine.states],
        "metadata": machine.metadata,
    }
    if invariants is not None:
        payload["invariants"] = invariants.model_dump()
    return payload


def machine_from_dict(payload: dict) -> EpsilonMachine:
    transitions: Dict[int, Dict[int, Tuple[int, float]]] = {s: {} for s in payload["states"]}
    for state, symbol, target, prob in payload["transitions"]:
        transitions[int(state)][int(symbol)] = (int(target), float(prob))
    return EpsilonMachine(
        states=[int(s) for s in payload["states"]],
        transitions=transitions,
        stationary_dist={int(s): float(p) for s, p in zip(payload["states"], payload["stationary"])},
        alphabet_size=len(payload["alphabet"]),
        order_used=payload["order_used"],
        metadata=payload.get("metadata", {}),
    )
