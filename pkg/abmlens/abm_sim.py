"""Reference elder-caregiver agent-based model.

The dynamics are a stand-in: no published update rules exist for the model
this toolkit was designed around, so a minimal model coupling walkability,
caregiver effort and elder mobility is fixed here. Elders sit on a
``grid_side x grid_side`` neighbourhood grid (assigned round-robin), each cell
has a walkability ``w``, each elder has a mobility ``m`` and a need ``1 - m``.
Caregivers hand out capacity greedily to the neediest elders.

Randomness comes from numpy's ``Philox`` counter-based generator seeded with
``SimConfig.seed``; per tick the cell noises are drawn before the elder
noises, so a config always maps to the same bits on every platform.
"""
import json
import logging
import tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from abmlens.helpers.artifacts import write_csv, write_json
from abmlens.helpers.table_reader import read_table_with_columns
from abmlens.settings import max_workers

logger = logging.getLogger(__name__)

VARIABLES = ("walkability", "effort", "mobility")
SEED_MODULUS = 2**64


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    n_elders: int = Field(48, ge=1)
    n_caregivers: int = Field(4, ge=0)
    grid_side: int = Field(4, ge=1)
    horizon: int = Field(600, ge=1)
    caregiver_capacity: float = Field(6.0, ge=0.0)
    walkability_decay: float = Field(0.05, ge=0.0, le=1.0)
    walkability_renewal: float = Field(0.1, ge=0.0, le=1.0)
    mobility_recovery: float = Field(0.1, ge=0.0, le=1.0)
    noise_level: float = Field(0.02, ge=0.0)
    # Calibration placeholder with no dynamical role; screening control.
    control_knob: float = 0.0
    seed: int = Field(7, ge=0, lt=SEED_MODULUS)


REAL_PARAMETERS = tuple(
    name for name, field in SimConfig.model_fields.items() if field.annotation is float
)


@dataclass
class SimulationOutput:
    """``sequences[var]`` is (n_elders, T); ``snapshots`` is (T, n_elders, 3)."""

    sequences: dict
    snapshots: np.ndarray
    config_echo: SimConfig

    @property
    def horizon(self) -> int:
        return self.snapshots.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimulationOutput):
            return NotImplemented
        return (
            self.config_echo == other.config_echo
            and np.array_equal(self.snapshots, other.snapshots)
            and all(
                np.array_equal(self.sequences[var], other.sequences[var])
                for var in VARIABLES
            )
        )


class SweepRun(NamedTuple):
    theta: float
    replicate: int
    output: SimulationOutput


def _allocate_effort(need: np.ndarray, n_caregivers: int, capacity: float) -> np.ndarray:
    # Caregivers scan the same need-ordered list and each continues where the
    # previous one ran dry, which is one pooled budget handed out in scan order.
    budget = n_caregivers * capacity
    order = np.argsort(-need, kind="stable")
    ordered_need = need[order]
    already_served = np.cumsum(ordered_need) - ordered_need
    given = np.clip(budget - already_served, 0.0, ordered_need)
    effort = np.empty_like(need)
    effort[order] = given
    return effort


def _cell_means(values: np.ndarray, cell_of: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    totals = np.bincount(cell_of, weights=values, minlength=occupancy.size)
    means = np.full(occupancy.size, values.mean())
    occupied = occupancy > 0
    means[occupied] = totals[occupied] / occupancy[occupied]
    return means


def _simulate(config: SimConfig) -> SimulationOutput:
    rng = np.random.Generator(np.random.Philox(config.seed))
    n_cells = config.grid_side**2
    n = config.n_elders
    cell_of = np.arange(n) % n_cells
    occupancy = np.bincount(cell_of, minlength=n_cells)

    walkability = rng.uniform(0.0, 1.0, n_cells)
    mobility = rng.uniform(0.0, 1.0, n)
    noise = config.noise_level
    recovery = config.mobility_recovery

    snapshots = np.empty((config.horizon, n, len(VARIABLES)))
    for t in range(config.horizon):
        effort = _allocate_effort(1.0 - mobility, config.n_caregivers, config.caregiver_capacity)
        cell_noise = rng.uniform(-noise, noise, n_cells)
        elder_noise = rng.uniform(-noise, noise, n)

        local_mobility = _cell_means(mobility, cell_of, occupancy)
        local_effort = _cell_means(effort, cell_of, occupancy)
        walkability = np.clip(
            walkability
            - config.walkability_decay * (1.0 - local_mobility)
            + config.walkability_renewal * local_effort
            + cell_noise,
            0.0,
            1.0,
        )
        w = walkability[cell_of]
        mobility = np.clip(
            mobility + recovery * effort * w - (1.0 - w) * recovery / 2.0 + elder_noise,
            0.0,
            1.0,
        )
        snapshots[t, :, 0] = w
        snapshots[t, :, 1] = effort
        snapshots[t, :, 2] = mobility

    sequences = {var: snapshots[:, :, j].T.copy() for j, var in enumerate(VARIABLES)}
    return SimulationOutput(sequences=sequences, snapshots=snapshots, config_echo=config)


def simulate(config: SimConfig) -> SimulationOutput:
    """Run the model for ``config.horizon`` ticks; a pure function of ``config``."""
    config = SimConfig.model_validate(config.model_dump())
    logger.info(
        f"simulate(n_elders={config.n_elders}, horizon={config.horizon}, "
        f"caregiver_capacity={config.caregiver_capacity}, seed={config.seed})"
    )
    return _simulate(config)


def _sweep_configs(
    base: SimConfig, param_name: str, values: Sequence[float], replicates: int
) -> List[SimConfig]:
    if param_name not in REAL_PARAMETERS:
        raise ValueError(
            f"Unknown sweep parameter {param_name!r}. Valid names: {list(REAL_PARAMETERS)}"
        )
    if len(values) == 0:
        raise ValueError("values must not be empty")
    if replicates < 1:
        raise ValueError(f"replicates must be >= 1, got {replicates}")

    configs = []
    for value in values:
        for replicate in range(replicates):
            fields = base.model_dump()
            fields[param_name] = float(value)
            fields["seed"] = (base.seed + replicate) % SEED_MODULUS
            configs.append(SimConfig.model_validate(fields))
    return configs


def sweep(
    base: SimConfig,
    param_name: str,
    values: Sequence[float],
    replicates: int,
    workers: Optional[int] = None,
) -> List[SweepRun]:
    """Simulate every (value, replicate) pair, ordered by value then replicate.

    Replicate ``r`` runs with ``base.seed + r``.
    """
    configs = _sweep_configs(base, param_name, values, replicates)
    workers = workers or max_workers()
    logger.info(
        f"sweep(param={param_name}, values={len(values)}, replicates={replicates}, workers={workers})"
    )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_simulate, configs))
    else:
        outputs = [_simulate(config) for config in configs]

    runs = []
    for index, output in enumerate(outputs):
        value_index, replicate = divmod(index, replicates)
        runs.append(SweepRun(float(values[value_index]), replicate, output))
    return runs


def population_series(
    output: SimulationOutput, variable: str, agent: Optional[int] = None
) -> np.ndarray:
    """Per-tick population mean of ``variable``, or one agent's series."""
    if variable not in VARIABLES:
        raise ValueError(f"Unknown variable {variable!r}. Valid names: {list(VARIABLES)}")
    series = output.sequences[variable]
    if agent is None:
        return series.mean(axis=0)
    if not 0 <= agent < series.shape[0]:
        raise ValueError(f"agent must be in [0, {series.shape[0]}), got {agent}")
    return series[agent].copy()


def load_config(path) -> SimConfig:
    """Read a flat key-value JSON or TOML file into a ``SimConfig``."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a flat key-value mapping")
    return SimConfig.model_validate(data)


# ───────────────────────────────
# Persistence
# ───────────────────────────────
def save_output(output: SimulationOutput, directory) -> None:
    directory = Path(directory)
    n, horizon = output.sequences[VARIABLES[0]].shape
    for var in VARIABLES:
        frame = pd.DataFrame(
            {
                "agent_id": np.repeat(np.arange(n), horizon),
                "t": np.tile(np.arange(horizon), n),
                "value": output.sequences[var].ravel(),
            }
        )
        write_csv(frame, directory / f"sequences_{var}.csv")

    flat = output.snapshots.reshape(horizon * n, len(VARIABLES))
    snapshots = pd.DataFrame(
        {"t": np.repeat(np.arange(horizon), n), "agent_id": np.tile(np.arange(n), horizon)}
    )
    for j, var in enumerate(VARIABLES):
        snapshots[var] = flat[:, j]
    write_csv(snapshots, directory / "snapshots.csv")
    write_json(output.config_echo.model_dump(), directory / "config.json")


def load_output(directory) -> SimulationOutput:
    directory = Path(directory)
    config = load_config(directory / "config.json")
    frame = read_table_with_columns(
        directory / "snapshots.csv", ["t", "agent_id", *VARIABLES]
    ).sort_values(["t", "agent_id"], kind="stable")
    horizon = int(frame["t"].max()) + 1
    n = int(frame["agent_id"].max()) + 1
    if len(frame) != horizon * n:
        raise ValueError(
            f"{directory / 'snapshots.csv'} has {len(frame)} rows, expected {horizon * n}"
        )
    snapshots = frame[list(VARIABLES)].to_numpy(dtype=float).reshape(horizon, n, len(VARIABLES))
    sequences = {var: snapshots[:, :, j].T.copy() for j, var in enumerate(VARIABLES)}
    return SimulationOutput(sequences=sequences, snapshots=snapshots, config_echo=config)


def save_sweep(runs: Sequence[SweepRun], param_name: str, directory) -> None:
    """One ``runs/NNN_rRR`` output directory per run plus a ``sweep.json`` index."""
    directory = Path(directory)
    index = []
    thetas: List[float] = []
    for run in runs:
        if run.theta not in thetas:
            thetas.append(run.theta)
        name = f"runs/{thetas.index(run.theta):03d}_r{run.replicate:02d}"
        (directory / name).mkdir(parents=True)
        save_output(run.output, directory / name)
        index.append({"theta": run.theta, "replicate": run.replicate, "directory": name})
    write_json({"param_name": param_name, "values": thetas, "runs": index}, directory / "sweep.json")


def load_sweep(directory):
    """Return ``(param_name, runs)`` from a directory written by ``save_sweep``."""
    directory = Path(directory)
    sweep_file = directory / "sweep.json"
    if not sweep_file.exists():
        raise FileNotFoundError(f"No sweep.json in {directory}")
    index = json.loads(sweep_file.read_text(encoding="utf-8"))
    runs = [
        SweepRun(float(entry["theta"]), int(entry["replicate"]), load_output(directory / entry["directory"]))
        for entry in index["runs"]
    ]
    return index["param_name"], runs
