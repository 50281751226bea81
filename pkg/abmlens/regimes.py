"""Parameter-space structure built from per-run temporal and geometric descriptors.

One surface cell is one (theta, replicate) run pushed through both pipelines:
symbolize -> emachine on a designated observable, and diffusion + descriptors
on the pooled final window of snapshots. Replicates are reduced to mean and
standard deviation per descriptor field.
"""
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from SALib.analyze import morris as morris_analyze
from SALib.sample import morris as morris_sample
from sklearn.cluster import DBSCAN, AgglomerativeClustering, KMeans
from sklearn.metrics import silhouette_score
from sklearn.mixture import GaussianMixture
from sklearn.preprocessing import StandardScaler

from abmlens.abm_sim import (
    REAL_PARAMETERS,
    VARIABLES,
    SimConfig,
    SimulationOutput,
    SweepRun,
    population_series,
    simulate,
    sweep,
)
from abmlens.descriptors import GeometryDescriptor, divergence, shape_summary
from abmlens.diffusion import NoiseSchedule, TrainConfig, train
from abmlens.emachine import AnalysisOptions, Invariants, analyze, machine_to_dict
from abmlens.helpers.artifacts import read_json, write_csv, write_json
from abmlens.settings import max_workers
from abmlens.symbolize import (
    AggregationSpec,
    Method,
    Reducer,
    aggregate_series,
    aggregate_snapshots,
    discretize,
)

logger = logging.getLogger(__name__)

TEMPORAL_FIELDS = ("h_mu", "c_mu", "excess_entropy", "n_states")
SUMMARY_FIELDS = ("h_mu", "c_mu", "excess_entropy", "effective_dim", "n_modes", "mean_score_norm")
RATE_PARAMETERS = ("walkability_decay", "walkability_renewal", "mobility_recovery")


class PipelineOptions(BaseModel):
    variable: Literal["walkability", "effort", "mobility"] = "mobility"
    agent: Optional[int] = Field(None, ge=0)
    n_bins: int = Field(2, ge=1)
    method: Method = "quantile"
    analysis: AnalysisOptions = Field(default_factory=AnalysisOptions)
    snapshot_window: float = Field(0.25, gt=0.0, le=1.0)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=30))
    n_steps: int = Field(200, ge=1)
    score_step: Optional[int] = Field(None, ge=1)
    max_modes: int = Field(3, ge=1)
    em_restarts: int = Field(50, ge=1)
    max_samples: int = Field(2000, ge=10)
    seed: int = Field(0, ge=0)


class FieldStats(BaseModel):
    mean: float
    sd: float
    n: int


class DescriptorVector(BaseModel):
    theta: float | List[float]
    scale_k: int = Field(1, ge=1)
    temporal: Optional[Invariants] = None
    geometric: Optional[GeometryDescriptor] = None
    replicate_stats: Dict[str, FieldStats] = Field(default_factory=dict)
    n_replicates: int = 0
    failures: List[str] = Field(default_factory=list)
    machine: Optional[dict] = None

    def value(self, field: str) -> float:
        if field not in self.replicate_stats:
            raise ValueError(
                f"Unknown descriptor field {field!r}. Available: {sorted(self.replicate_stats)}"
            )
        return self.replicate_stats[field].mean


class ScaleParamTensor(BaseModel):
    scales: List[int]
    thetas: List[float]
    cells: List[List[DescriptorVector]]

    @model_validator(mode="after")
    def _complete_grid(self):
        if len(self.cells) != len(self.scales) or any(len(row) != len(self.thetas) for row in self.cells):
            raise ValueError(
                f"tensor needs {len(self.scales)} x {len(self.thetas)} cells, "
                f"got rows of lengths {[len(row) for row in self.cells]}"
            )
        return self


class ClusterResult(BaseModel):
    method: str
    labels: List[int]
    n_clusters: int
    silhouette: Optional[float] = None
    all_noise: bool = False
    fields: List[str]


class EffectStats(BaseModel):
    mu_star: float
    mean: float
    sd: float


class EffectsResult(BaseModel):
    delta: float
    trajectories: int
    effects: Dict[str, Dict[str, EffectStats]]
    single_trajectory: bool = False


class CellResult(NamedTuple):
    theta: float
    replicate: int
    fields: Optional[Dict[str, float]]
    machine: Optional[dict]
    error: Optional[str]


# ───────────────────────────────
# One cell: both pipelines on one run
# ───────────────────────────────
def _aggregate_output(output: SimulationOutput, spec: AggregationSpec) -> SimulationOutput:
    if spec.k == 1:
        return output
    sequences = {
        var: np.vstack([aggregate_series(row, spec) for row in output.sequences[var]])
        for var in VARIABLES
    }
    snapshots = aggregate_snapshots(output.snapshots, spec)
    return SimulationOutput(sequences=sequences, snapshots=snapshots, config_echo=output.config_echo)


def window_samples(output: SimulationOutput, options: PipelineOptions) -> np.ndarray:
    """Pool the final ``snapshot_window`` share of ticks into one sample set."""
    horizon = output.snapshots.shape[0]
    window = max(1, math.ceil(options.snapshot_window * horizon))
    pooled = output.snapshots[horizon - window :].reshape(-1, output.snapshots.shape[2])
    if pooled.shape[0] > options.max_samples:
        keep = np.linspace(0, pooled.shape[0] - 1, options.max_samples).round().astype(int)
        pooled = pooled[keep]
    return pooled


def _flatten(invariants: Invariants, n_states: int, geometry: GeometryDescriptor) -> Dict[str, float]:
    fields = {
        "h_mu": invariants.entropy_rate,
        "c_mu": invariants.statistical_complexity,
        "excess_entropy": invariants.excess_entropy,
        "n_states": float(n_states),
        "effective_dim": geometry.effective_dim,
        "mean_score_norm": geometry.mean_score_norm,
        "n_modes": float(geometry.n_modes),
        "tail_mass": geometry.tail_mass,
    }
    names = VARIABLES if len(geometry.mean) == len(VARIABLES) else [f"y{i}" for i in range(len(geometry.mean))]
    for i, name in enumerate(names):
        fields[f"mean_{name}"] = geometry.mean[i]
        fields[f"skewness_{name}"] = geometry.skewness[i]
        for j in range(i, len(names)):
            fields[f"cov_{name}_{names[j]}"] = geometry.covariance[i][j]
    for name in ("kl_to_reference", "w1_to_reference"):
        value = getattr(geometry, name)
        if value is not None:
            fields[name] = value
    return fields


def _cell_descriptors(
    output: SimulationOutput,
    options: PipelineOptions,
    spec: AggregationSpec,
    reference: Optional[np.ndarray],
) -> Tuple[Dict[str, float], dict]:
    output = _aggregate_output(output, spec)
    series = population_series(output, options.variable, options.agent)
    seq = discretize(series, options.n_bins, options.method)
    machine, invariants = analyze(seq, options.analysis)

    samples = window_samples(output, options)
    model = train(samples, options.train, NoiseSchedule.linear(options.n_steps))
    geometry = shape_summary(
        samples, model, options.score_step, options.max_modes, options.em_restarts, options.seed
    )
    if reference is not None:
        geometry.kl_to_reference = divergence(samples, reference, "kl_knn")
        geometry.w1_to_reference = divergence(samples, reference, "wasserstein1_sliced")
    return _flatten(invariants, machine.n_states, geometry), machine_to_dict(machine, invariants)


def _run_cell(job) -> CellResult:
    theta, replicate, output, options, spec, reference = job
    try:
        fields, machine = _cell_descriptors(output, options, spec, reference)
        return CellResult(theta, replicate, fields, machine, None)
    except Exception as e:
        logger.error(f"Cell theta={theta} replicate={replicate} failed: {str(e)}")
        return CellResult(theta, replicate, None, None, f"replicate {replicate}: {e}")


def _summarize(theta: float, scale_k: int, cells: List[CellResult]) -> DescriptorVector:
    vector = DescriptorVector(theta=theta, scale_k=scale_k)
    vector.failures = [cell.error for cell in cells if cell.error]
    ok = [cell for cell in cells if cell.fields is not None]
    vector.n_replicates = len(ok)
    if not ok:
        return vector

    names = [name for name in ok[0].fields if all(name in cell.fields for cell in ok)]
    for name in names:
        values = np.array([cell.fields[name] for cell in ok], dtype=float)
        sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
        vector.replicate_stats[name] = FieldStats(mean=float(values.mean()), sd=sd, n=values.size)

    stat = {name: s.mean for name, s in vector.replicate_stats.items()}
    vector.temporal = Invariants(
        entropy_rate=stat["h_mu"],
        statistical_complexity=stat["c_mu"],
        excess_entropy=stat["excess_entropy"],
    )
    names3 = [name[len("mean_"):] for name in stat if name.startswith("mean_") and name != "mean_score_norm"]
    vector.geometric = GeometryDescriptor(
        effective_dim=stat["effective_dim"],
        mean_score_norm=stat["mean_score_norm"],
        n_modes=max(1, int(round(stat["n_modes"]))),
        skewness=[stat[f"skewness_{n}"] for n in names3],
        covariance=[
            [stat[f"cov_{a}_{b}"] if f"cov_{a}_{b}" in stat else stat[f"cov_{b}_{a}"] for b in names3]
            for a in names3
        ],
        tail_mass=stat["tail_mass"],
        mean=[stat[f"mean_{n}"] for n in names3],
        kl_to_reference=stat.get("kl_to_reference"),
        w1_to_reference=stat.get("w1_to_reference"),
    )
    vector.machine = ok[0].machine
    return vector


def _map_cells(jobs: list, workers: int) -> List[CellResult]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(job) for job in jobs]


def response_surface(
    runs: Sequence[SweepRun],
    options: Optional[PipelineOptions] = None,
    spec: Optional[AggregationSpec] = None,
    workers: Optional[int] = None,
) -> List[DescriptorVector]:
    """
    Descriptor vectors per theta, in the order thetas first appear in ``runs``.

    KL and sliced W1 to the reference distribution are measured against
    replicate 0 of the first theta. Failed cells are listed in ``DescriptorVector.failures``.
    """
    options = options or PipelineOptions()
    spec = spec or AggregationSpec()
    if not runs:
        raise ValueError("runs must not be empty")
    workers = workers or max_workers()

    reference = window_samples(_aggregate_output(runs[0].output, spec), options)
    jobs = [(run.theta, run.replicate, run.output, options, spec, reference) for run in runs]
    logger.info(f"response_surface(cells={len(jobs)}, scale_k={spec.k}, workers={workers})")
    results = _map_cells(jobs, workers)

    thetas: List[float] = []
    for run in runs:
        if run.theta not in thetas:
            thetas.append(run.theta)
    return [
        _summarize(theta, spec.k, [cell for cell in results if cell.theta == theta])
        for theta in thetas
    ]


# ───────────────────────────────
# Regime boundaries
# ───────────────────────────────
def detect_regime_shifts(
    surface: Sequence[DescriptorVector], field: str, z_threshold: float = 2.0
) -> List[int]:
    """
    Indices where a descriptor jumps: |diff_j - mean(diff)| >= z * sd(diff).

    Returns the index of the first point after each flagged jump. Zero
    spread in the differences (constant or linear descriptors) flags nothing.
    """
    if len(surface) < 4:
        raise ValueError(f"detect_regime_shifts needs at least 4 surface points, got {len(surface)}")
    thetas = []
    for vector in surface:
        if not isinstance(vector.theta, (int, float)):
            raise ValueError("detect_regime_shifts supports scalar theta only (1-D sweeps)")
        thetas.append(float(vector.theta))
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("surface must be sorted by theta")

    values = np.array([vector.value(field) for vector in surface], dtype=float)
    diffs = np.diff(values)
    spread = float(diffs.std())
    scale = max(float(np.abs(diffs).max()), 1.0)
    if spread <= 1e-12 * scale:
        return []
    deviation = np.abs(diffs - diffs.mean())
    # Relative slack so a deviation sitting exactly on the threshold counts.
    flagged = np.flatnonzero(deviation >= z_threshold * spread * (1.0 - 1e-9))
    return sorted(int(j) + 1 for j in flagged)


# ───────────────────────────────
# Behavioral clustering
# ───────────────────────────────
def _common_fields(vectors: Sequence[DescriptorVector]) -> List[str]:
    names = [name for name in vectors[0].replicate_stats]
    return [
        name
        for name in names
        if all(
            name in v.replicate_stats and math.isfinite(v.replicate_stats[name].mean) for v in vectors
        )
    ]


def shape_fields(vectors: Sequence[DescriptorVector]) -> List[str]:
    """Fields finite in every vector, excluding the per-variable means."""
    return [
        name
        for name in _common_fields(vectors)
        if not (name.startswith("mean_") and name[len("mean_"):] in VARIABLES)
    ]


def cluster_behaviors(
    vectors: Sequence[DescriptorVector],
    method: Literal["kmeans", "gmm", "hierarchical", "dbscan"] = "kmeans",
    k: int = 2,
    eps: float = 0.5,
    min_pts: int = 5,
    fields: Optional[List[str]] = None,
    seed: int = 0,
) -> ClusterResult:
    """Cluster descriptor vectors after z-scoring each field over the sweep."""
    if len(vectors) < 2:
        raise ValueError(f"cluster_behaviors needs at least 2 vectors, got {len(vectors)}")
    fields = fields or _common_fields(vectors)
    if not fields:
        raise ValueError("no descriptor field is present and finite in every vector")
    features = StandardScaler().fit_transform(
        np.array([[v.value(name) for name in fields] for v in vectors], dtype=float)
    )
    n = features.shape[0]

    if method in ("kmeans", "gmm", "hierarchical") and k > n:
        raise ValueError(f"k={k} exceeds the number of vectors {n}")
    if method == "kmeans":
        labels = KMeans(n_clusters=k, init="k-means++", n_init=25, random_state=seed).fit_predict(features)
    elif method == "gmm":
        labels = GaussianMixture(n_components=k, n_init=10, random_state=seed).fit_predict(features)
    elif method == "hierarchical":
        labels = AgglomerativeClustering(n_clusters=k, linkage="average").fit_predict(features)
    elif method == "dbscan":
        labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(features)
    else:
        raise ValueError(f"method must be kmeans, gmm, hierarchical or dbscan; got {method!r}")

    labels = [int(label) for label in labels]
    distinct = set(labels)
    all_noise = distinct == {-1}
    if all_noise:
        logger.warning("DBSCAN labeled every descriptor vector as noise")
    # DBSCAN noise (-1) is not a cluster; score only the clustered points.
    clustered = np.array(labels) != -1
    kept = np.array(labels)[clustered]
    silhouette = None
    if 2 <= len(set(kept.tolist())) <= kept.size - 1:
        silhouette = float(silhouette_score(features[clustered], kept))
    return ClusterResult(
        method=method,
        labels=labels,
        n_clusters=len(distinct - {-1}),
        silhouette=silhouette,
        all_noise=all_noise,
        fields=fields,
    )


# ───────────────────────────────
# Elementary effects
# ───────────────────────────────
def _default_bounds(param: str, base: SimConfig) -> Tuple[float, float]:
    value = getattr(base, param)
    if param in RATE_PARAMETERS:
        return 0.0, 1.0
    if param == "control_knob":
        return value - 1.0, value + 1.0
    return (0.5 * value, 1.5 * value) if value > 0 else (0.0, 1.0)


def _morris_jump(num_levels: int) -> float:
    """Jump between grid levels of a Morris design, as a share of the sampled range."""
    return num_levels / (2.0 * (num_levels - 1))


def _design_window(param: str, bounds: Tuple[float, float], delta: float, num_levels: int) -> List[float]:
    """Range of width ``delta / jump`` centred in ``bounds``, so every design jump equals ``delta``."""
    low, high = bounds
    width = delta / _morris_jump(num_levels)
    if width > high - low:
        raise ValueError(
            f"delta={delta} needs a range of {width:.4g} for {param}, but its bounds {bounds} span {high - low:.4g}"
        )
    centre = 0.5 * (low + high)
    return [centre - width / 2.0, centre + width / 2.0]


def _finite_difference(effect: np.ndarray, num_levels: int, delta: float) -> np.ndarray:
    # SALib reports change per unit-cube jump; convert to change per unit of delta.
    return effect * _morris_jump(num_levels) / delta


def elementary_effects(
    base: SimConfig,
    params: List[str],
    delta: float,
    r: int,
    options: Optional[PipelineOptions] = None,
    bounds: Optional[Dict[str, Tuple[float, float]]] = None,
    seed: int = 0,
    num_levels: int = 4,
) -> EffectsResult:
    """
    Morris screening with ``r`` trajectories drawn and reduced by SALib.

    Each trajectory moves every parameter once by exactly ``delta``; all of
    its runs share the simulation seed ``base.seed + j``. Effects are
    descriptor changes per unit of ``delta``, summarized as mu_star, mean
    and sd per descriptor field.
    """
    options = options or PipelineOptions()
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if num_levels < 2 or num_levels % 2:
        raise ValueError(f"num_levels must be an even integer >= 2, got {num_levels}")
    unknown = [p for p in params if p not in REAL_PARAMETERS]
    if unknown:
        raise ValueError(f"Unknown parameters {unknown}. Valid names: {list(REAL_PARAMETERS)}")

    problem = {
        "num_vars": len(params),
        "names": list(params),
        "bounds": [
            _design_window(p, (bounds or {}).get(p) or _default_bounds(p, base), delta, num_levels)
            for p in params
        ],
    }
    design = morris_sample.sample(problem, N=r, num_levels=num_levels, seed=seed)
    logger.info(f"elementary_effects(params={params}, delta={delta}, r={r}, runs={design.shape[0]})")

    identity = AggregationSpec()
    rows: List[Dict[str, float]] = []
    for i, point in enumerate(design):
        trajectory = i // (len(params) + 1)
        config = SimConfig.model_validate(
            {
                **base.model_dump(),
                **{p: float(value) for p, value in zip(params, point)},
                "seed": (base.seed + trajectory) % 2**64,
            }
        )
        fields, _ = _cell_descriptors(simulate(config), options, identity, None)
        rows.append(fields)

    names = [name for name in rows[0] if all(name in row for row in rows)]
    if r == 1:
        logger.warning("elementary_effects ran a single trajectory; sd reported as 0")
    effects: Dict[str, Dict[str, EffectStats]] = {p: {} for p in params}
    for name in names:
        outputs = np.array([row[name] for row in rows], dtype=float)
        with warnings.catch_warnings():
            # One trajectory leaves SALib's sigma undefined.
            warnings.simplefilter("ignore", RuntimeWarning)
            indices = morris_analyze.analyze(problem, design, outputs, num_levels=num_levels, seed=seed)
        mu = _finite_difference(np.asarray(indices["mu"]), num_levels, delta)
        mu_star = _finite_difference(np.asarray(indices["mu_star"]), num_levels, delta)
        sigma = _finite_difference(np.asarray(indices["sigma"]), num_levels, delta)
        for i, p in enumerate(params):
            effects[p][name] = EffectStats(
                mu_star=float(mu_star[i]),
                mean=float(mu[i]),
                sd=float(sigma[i]) if r > 1 else 0.0,
            )
    return EffectsResult(delta=delta, trajectories=r, effects=effects, single_trajectory=r == 1)


# ───────────────────────────────
# Multiscale family and scale-parameter tensor
# ───────────────────────────────
class ScaleFamilyEntry(BaseModel):
    k: int
    invariants: Invariants
    n_states: int
    machine: dict


def scale_family(
    series: Sequence[float],
    scales: Sequence[int],
    reducer: Reducer = "mean",
    options: Optional[PipelineOptions] = None,
) -> List[ScaleFamilyEntry]:
    """h_mu(k), C_mu(k), E(k) of one observable across aggregation scales."""
    options = options or PipelineOptions()
    family = []
    for k in scales:
        aggregated = aggregate_series(series, AggregationSpec(k=k, reducer=reducer))
        seq = discretize(aggregated, options.n_bins, options.method)
        machine, invariants = analyze(seq, options.analysis)
        family.append(
            ScaleFamilyEntry(
                k=k,
                invariants=invariants,
                n_states=machine.n_states,
                machine=machine_to_dict(machine, invariants),
            )
        )
    return family


def tensor_from_runs(
    runs: Sequence[SweepRun],
    scales: Sequence[int],
    reducer: Reducer = "mean",
    options: Optional[PipelineOptions] = None,
    workers: Optional[int] = None,
) -> ScaleParamTensor:
    if not scales or any(k < 1 for k in scales):
        raise ValueError(f"scales must be a non-empty list of integers >= 1, got {list(scales)}")
    rows = [
        response_surface(runs, options, AggregationSpec(k=k, reducer=reducer), workers)
        for k in scales
    ]
    thetas = [float(vector.theta) for vector in rows[0]]
    return ScaleParamTensor(scales=list(scales), thetas=thetas, cells=rows)


def scale_param_tensor(
    base: SimConfig,
    param_name: str,
    values: Sequence[float],
    replicates: int,
    scales: Sequence[int],
    reducer: Reducer = "mean",
    options: Optional[PipelineOptions] = None,
    workers: Optional[int] = None,
) -> ScaleParamTensor:
    """Descriptor grid over aggregation scales (rows) and parameter values (columns)."""
    runs = sweep(base, param_name, values, replicates, workers)
    return tensor_from_runs(runs, scales, reducer, options, workers)


# ───────────────────────────────
# Persistence
# ───────────────────────────────
def surface_to_frame(surface: Sequence[DescriptorVector]) -> pd.DataFrame:
    rows = []
    for vector in surface:
        for name, stats in vector.replicate_stats.items():
            rows.append(
                {
                    "theta": vector.theta,
                    "scale_k": vector.scale_k,
                    "field": name,
                    "mean": stats.mean,
                    "sd": stats.sd,
                    "n_replicates": stats.n,
                }
            )
        if vector.failures:
            rows.append(
                {
                    "theta": vector.theta,
                    "scale_k": vector.scale_k,
                    "field": "failed_replicates",
                    "mean": float(len(vector.failures)),
                    "sd": 0.0,
                    "n_replicates": vector.n_replicates,
                }
            )
    return pd.DataFrame(rows, columns=["theta", "scale_k", "field", "mean", "sd", "n_replicates"])


def save_surface(surface: Sequence[DescriptorVector], directory) -> None:
    directory = Path(directory)
    write_csv(surface_to_frame(surface), directory / "surface.csv")
    write_json([vector.model_dump(mode="json") for vector in surface], directory / "surface.json")


def load_surface(path) -> List[DescriptorVector]:
    path = Path(path)
    payload = read_json(path / "surface.json" if path.is_dir() else path)
    return [DescriptorVector.model_validate(item) for item in payload]


def save_tensor(tensor: ScaleParamTensor, directory) -> None:
    directory = Path(directory)
    frame = pd.concat([surface_to_frame(row) for row in tensor.cells], ignore_index=True)
    write_csv(frame, directory / "tensor.csv")
    write_json(tensor.model_dump(mode="json"), directory / "tensor.json")


def load_tensor(path) -> ScaleParamTensor:
    path = Path(path)
    return ScaleParamTensor.model_validate(read_json(path / "tensor.json" if path.is_dir() else path))
