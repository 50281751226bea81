"""Run the acceptance oracles as one evaluation batch and log the score.

    python -m abmlens.evals.evaluate_acceptance
"""
import os
from datetime import datetime
from typing import Callable, Dict, Tuple

import numpy as np
from sklearn.metrics import adjusted_rand_score

from abmlens.abm_sim import SimConfig, sweep
from abmlens.descriptors import count_modes, divergence, effective_dimensionality
from abmlens.diffusion import NoiseSchedule, TrainConfig, gradient_check, sample, score, train
from abmlens.emachine import analyze, check_invariants
from abmlens.evals.evaluation_data import EVALUATION_SAMPLES, FIXTURE_LENGTH
from abmlens.evals.processes import fair_coin, golden_mean, period_two
from abmlens.regimes import (
    PipelineOptions,
    cluster_behaviors,
    detect_regime_shifts,
    response_surface,
    scale_family,
    shape_fields,
)
from abmlens.settings import configure_logging

# Get current script directory
current_dir = os.path.dirname(os.path.abspath(__file__))

log_dir = os.path.join(current_dir, "result_logs")
os.makedirs(log_dir, exist_ok=True)

log_filename = os.path.join(
    log_dir, f"eval_results_{datetime.now().strftime('%d-%m-%Y_%H:%M')}.txt"
)

PROCESSES = {"fair_coin": fair_coin, "period_two": lambda n, seed: period_two(n), "golden_mean": golden_mean}


def _close(actual: float, expected: float, tolerance: float) -> bool:
    return abs(actual - expected) <= tolerance


def check_fair_coin(case: dict) -> Tuple[bool, str]:
    machine, inv = analyze(PROCESSES["fair_coin"](FIXTURE_LENGTH, 1))
    check_invariants(machine)
    exp, tol = case["expected"], case["tolerance"]
    ok = (
        machine.n_states == exp["n_states"]
        and _close(inv.entropy_rate, exp["h_mu"], tol)
        and _close(inv.statistical_complexity, exp["c_mu"], tol)
        and inv.excess_entropy <= exp["excess_entropy_max"]
    )
    return ok, f"states={machine.n_states} {inv.model_dump()}"


def check_period_two(case: dict) -> Tuple[bool, str]:
    machine, inv = analyze(PROCESSES["period_two"](FIXTURE_LENGTH, 0))
    check_invariants(machine)
    exp, tol = case["expected"], case["tolerance"]
    ok = (
        machine.n_states == exp["n_states"]
        and inv.entropy_rate <= exp["h_mu_max"]
        and _close(inv.statistical_complexity, exp["c_mu"], tol)
        and _close(inv.excess_entropy, exp["excess_entropy"], case["excess_entropy_tolerance"])
    )
    return ok, f"states={machine.n_states} {inv.model_dump()}"


def check_golden_mean(case: dict) -> Tuple[bool, str]:
    machine, inv = analyze(PROCESSES["golden_mean"](FIXTURE_LENGTH, 2))
    check_invariants(machine)
    exp, tol = case["expected"], case["tolerance"]
    probs = sorted(
        (prob for edges in machine.transitions.values() for _, prob in edges.values()),
    )
    ok = (
        machine.n_states == exp["n_states"]
        and _close(inv.entropy_rate, exp["h_mu"], tol)
        and _close(inv.statistical_complexity, exp["c_mu"], tol)
        and len(probs) == len(exp["transitions"])
        and all(_close(a, b, tol) for a, b in zip(probs, sorted(exp["transitions"])))
    )
    return ok, f"states={machine.n_states} probs={probs} {inv.model_dump()}"


def check_gaussian_score(case: dict) -> Tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(3))
    data = rng.standard_normal((2000, 2))
    model = train(data, TrainConfig(epochs=200, seed=0), NoiseSchedule.linear())
    step = model.schedule.n_steps // 4
    grid = np.array([[x, y] for x in np.linspace(-2, 2, 5) for y in np.linspace(-2, 2, 5)])
    scores = np.array([score(model, y, step) for y in grid])
    mae = float(np.mean(np.abs(scores + grid)))
    error = gradient_check(model, data[:64])
    exp = case["expected"]
    return mae < exp["score_mae_max"] and error < exp["gradient_error_max"], f"mae={mae:.4f} grad_err={error:.2e}"


def check_two_modes(case: dict) -> Tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(4))
    centres = np.where(rng.random(2000) < 0.5, -3.0, 3.0)
    data = (centres + rng.standard_normal(2000))[:, None]
    model = train(data, TrainConfig(epochs=200, seed=0), NoiseSchedule.linear())
    draws = sample(model, 5000, seed=1)[:, 0]
    shares = (float(np.mean(draws < 0)), float(np.mean(draws >= 0)))
    modes = count_modes(draws[:, None], 3, restarts=10)
    exp = case["expected"]
    return min(shares) >= exp["min_mode_share"] and modes == exp["n_modes"], f"shares={shares} modes={modes}"


def check_descriptors(case: dict) -> Tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(5))
    exp = case["expected"]
    iso = rng.standard_normal((5000, 3))
    dim = effective_dimensionality(iso)
    same = divergence(iso, iso, "wasserstein1_sliced")
    a = rng.standard_normal((4000, 1))
    b = rng.standard_normal((4000, 1)) + exp["shift"]
    shift = divergence(a, b, "wasserstein1_sliced")
    ok = (
        _close(dim, exp["effective_dim"], exp["effective_dim_tolerance"])
        and same == 0.0
        and _close(shift, exp["shift"], exp["shift_tolerance"])
    )
    return ok, f"effective_dim={dim:.3f} self_w1={same} shift_w1={shift:.3f}"


def check_multiscale(case: dict) -> Tuple[bool, str]:
    series = period_two(4000).as_array().astype(float)
    family = scale_family(series, [1, 2], "mean", PipelineOptions())
    c1, c2 = (entry.invariants.statistical_complexity for entry in family)
    exp, tol = case["expected"], case["tolerance"]
    return _close(c1, exp["c_mu_k1"], tol) and _close(c2, exp["c_mu_k2"], tol), f"c_mu(1)={c1:.4f} c_mu(2)={c2:.4f}"


def check_regimes(case: dict) -> Tuple[bool, str]:
    grid = case["sweep"]
    values = np.linspace(grid["start"], grid["stop"], grid["num"]).tolist()
    runs = sweep(SimConfig(), grid["param"], values, grid["replicates"])
    options = PipelineOptions(train=TrainConfig(epochs=5), em_restarts=2)
    surface = response_surface(runs, options)
    boundaries = detect_regime_shifts(surface, "mean_mobility", 2.0)
    if not boundaries:
        return False, "no regime boundary detected"
    threshold = surface[boundaries[0]].theta
    truth = [int(v.theta >= threshold) for v in surface]
    clusters = cluster_behaviors(surface, "kmeans", 2, fields=shape_fields(surface))
    ari = adjusted_rand_score(truth, clusters.labels)
    exp = case["expected"]
    return len(boundaries) >= exp["min_boundaries"] and ari >= exp["min_adjusted_rand"], (
        f"boundaries={boundaries} ari={ari:.3f}"
    )


CHECKS: Dict[str, Callable[[dict], Tuple[bool, str]]] = {
    "fair_coin": check_fair_coin,
    "period_two": check_period_two,
    "golden_mean": check_golden_mean,
    "diffusion_gaussian_score": check_gaussian_score,
    "diffusion_two_modes": check_two_modes,
    "descriptor_oracles": check_descriptors,
    "multiscale_period_two": check_multiscale,
    "regime_pipeline": check_regimes,
}


def evaluate():
    logs = []
    total = len(EVALUATION_SAMPLES)
    passed = 0

    def timestamped(msg: str) -> str:
        return f"[{datetime.now().strftime('%Y-%m-%d %H:%M:%S')}] {msg}"

    for idx, case in enumerate(EVALUATION_SAMPLES, start=1):
        logs.append(timestamped(f"[{idx}/{total}] {case['name']}"))
        try:
            ok, detail = CHECKS[case["name"]](case)
            logs.append(timestamped(f"Result: {detail}"))
            if ok:
                logs.append(timestamped("Match: PASSED"))
                passed += 1
            else:
                logs.append(timestamped("Match: FAILED"))
        except Exception as e:
            logs.append(timestamped(f"Error during evaluation: {str(e)}"))

    final_score = f"\nFinal Score: {passed}/{total} passed ({(passed/total)*100:.1f}%)"
    logs.append(timestamped(final_score))

    for line in logs:
        print(line)

    with open(log_filename, "w", encoding="utf-8") as f:
        f.write("\n".join(logs))

    print(f"\nEvaluation log written to {log_filename}")
    return passed == total


if __name__ == "__main__":
    configure_logging()
    raise SystemExit(0 if evaluate() else 1)
