"""Distributional-geometry descriptors of sample sets."""
import logging
import warnings
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree
from scipy.stats import skew, wasserstein_distance
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from abmlens.diffusion import ScoreModel, _score_batch, standardize
from abmlens.input_guards import finite_matrix, same_dimension

logger = logging.getLogger(__name__)

KNN_K = 5
N_SLICES = 64
SLICE_SEED = 0
EM_RESTARTS = 50
EM_ITERATIONS = 200
KL_FLOOR = -0.5
DEGENERATE_EIGENVALUE = 1e-300
DISTANCE_FLOOR = 1e-12
JITTER_SCALE = 1e-6
JITTER_SEED = 0


class GeometryDescriptor(BaseModel):
    effective_dim: float = Field(ge=1.0)
    mean_score_norm: Optional[float] = Field(None, ge=0.0)
    n_modes: int = Field(ge=1)
    skewness: List[float]
    covariance: List[List[float]]
    tail_mass: float = Field(ge=0.0, le=1.0)
    mean: List[float]
    kl_to_reference: Optional[float] = None
    w1_to_reference: Optional[float] = None


def _covariance(samples: np.ndarray) -> np.ndarray:
    if samples.shape[0] < 2:
        return np.zeros((samples.shape[1], samples.shape[1]))
    cov = np.cov(samples, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return (cov + cov.T) / 2.0


def _participation_ratio(cov: np.ndarray) -> float:
    eigenvalues = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    squares = float((eigenvalues**2).sum())
    if squares <= DEGENERATE_EIGENVALUE:
        return 1.0
    ratio = float(eigenvalues.sum() ** 2 / squares)
    return min(max(ratio, 1.0), float(cov.shape[0]))


def effective_dimensionality(samples) -> float:
    """Participation ratio of the covariance spectrum; 1 for zero-spread data."""
    samples = finite_matrix(samples, "samples")
    d = samples.shape[1]
    if samples.shape[0] < d + 1:
        raise ValueError(f"effective_dimensionality needs at least {d + 1} samples, got {samples.shape[0]}")
    return _participation_ratio(_covariance(samples))


def mean_score_norm(model: ScoreModel, samples, t: int) -> float:
    """Mean Euclidean norm of the score at step ``t`` over standardized samples."""
    scaled = standardize(model, samples)
    scores = _score_batch(model, scaled, t)
    return float(np.linalg.norm(scores, axis=1).mean())


def count_modes(samples, max_k: int, restarts: int = EM_RESTARTS, seed: int = 0) -> int:
    """Number of Gaussian-mixture components in 1..max_k with the lowest BIC."""
    samples = finite_matrix(samples, "samples")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    if samples.shape[0] < 10 * max_k:
        raise ValueError(
            f"count_modes needs at least {10 * max_k} samples for max_k={max_k}, got {samples.shape[0]}"
        )
    if max_k == 1:
        return 1

    spread = samples.std(axis=0)
    if not (spread > 0).any():
        return 1
    scaled = (samples - samples.mean(axis=0)) / np.where(spread > 0, spread, 1.0)
    reg_covar = max(1e-6 * float(np.trace(_covariance(scaled))), 1e-12)

    best_k, best_bic = 1, np.inf
    for k in range(1, max_k + 1):
        mixture = GaussianMixture(
            n_components=k,
            n_init=restarts,
            max_iter=EM_ITERATIONS,
            reg_covar=reg_covar,
            random_state=seed,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            mixture.fit(scaled)
        if not mixture.converged_:
            logger.warning(f"EM did not converge for k={k} on any restart; skipping")
            continue
        bic = mixture.bic(scaled)
        if bic < best_bic:
            best_k, best_bic = k, bic
    return best_k


def _has_ties(*arrays: np.ndarray) -> bool:
    pooled = np.vstack(arrays)
    return np.unique(pooled, axis=0).shape[0] < pooled.shape[0]


def _jitter(samples: np.ndarray, scale: np.ndarray, generator: np.random.Generator) -> np.ndarray:
    return samples + generator.uniform(-1.0, 1.0, samples.shape) * scale


def _kl_knn(a: np.ndarray, b: np.ndarray, k: int = KNN_K) -> float:
    """
    kNN estimate of KL(a || b).

    Tied rows (snapshots clipped at a bound repeat exactly) get a seeded
    uniform jitter far below the pooled data scale; an atom shared by both
    samples then contributes the log ratio of its masses.
    When ``b`` is the same sample as ``a`` each point's own match is skipped.
    """
    n, m, d = a.shape[0], b.shape[0], a.shape[1]
    same = a is b or (a.shape == b.shape and np.array_equal(a, b))
    if n <= k or m < k or (same and m <= k):
        raise ValueError(f"kl_knn needs more than {k} samples in a and at least {k} in b")
    generator = np.random.Generator(np.random.Philox(JITTER_SEED))
    scale = JITTER_SCALE * np.maximum(np.vstack([a, b]).std(axis=0), DISTANCE_FLOOR)
    if same:
        if _has_ties(a):
            a = _jitter(a, scale, generator)
        b = a
    elif _has_ties(a, b):
        a, b = _jitter(a, scale, generator), _jitter(b, scale, generator)

    rho = cKDTree(a).query(a, k=k + 1)[0][:, k]
    if same:
        nu, m_effective = rho, m - 1
    else:
        nu = cKDTree(b).query(a, k=k)[0]
        nu = nu[:, k - 1] if nu.ndim == 2 else nu
        m_effective = m
    rho = np.maximum(rho, DISTANCE_FLOOR)
    nu = np.maximum(nu, DISTANCE_FLOOR)
    estimate = float(d * np.mean(np.log(nu / rho)) + np.log(m_effective / (n - 1)))
    if estimate < KL_FLOOR:
        logger.warning(f"kNN KL estimate {estimate:.4f} clamped to {KL_FLOOR}")
        return KL_FLOOR
    return estimate


def _sliced_wasserstein(a: np.ndarray, b: np.ndarray) -> float:
    rng = np.random.Generator(np.random.Philox(SLICE_SEED))
    directions = rng.standard_normal((N_SLICES, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    distances = [wasserstein_distance(a @ u, b @ u) for u in directions]
    return float(np.mean(distances))


def divergence(a, b, metric: Literal["kl_knn", "wasserstein1_sliced"] = "wasserstein1_sliced") -> float:
    a = finite_matrix(a, "a")
    b = finite_matrix(b, "b")
    same_dimension(a, b, "a", "b")
    if metric == "kl_knn":
        return _kl_knn(a, b)
    if metric == "wasserstein1_sliced":
        return _sliced_wasserstein(a, b)
    raise ValueError(f"metric must be 'kl_knn' or 'wasserstein1_sliced', got {metric!r}")


def _tail_mass(samples: np.ndarray, cov: np.ndarray) -> float:
    centred = samples - samples.mean(axis=0)
    precision = np.linalg.pinv(cov)
    distances = np.einsum("ij,jk,ik->i", centred, precision, centred)
    return float(np.mean(distances > 9.0))


def _skewness(samples: np.ndarray) -> List[float]:
    values = []
    for column in samples.T:
        if np.ptp(column) == 0:
            values.append(0.0)
        else:
            values.append(float(skew(column, bias=True)))
    return values


def shape_summary(
    samples,
    model: Optional[ScoreModel] = None,
    score_step: Optional[int] = None,
    max_modes: int = 3,
    restarts: int = EM_RESTARTS,
    seed: int = 0,
) -> GeometryDescriptor:
    """
    Compose covariance, skewness, 3-sigma tail mass, participation ratio and mode count.

    ``mean_score_norm`` is filled only when a trained ``model`` is supplied;
    ``score_step`` defaults to a quarter of its schedule.
    """
    samples = finite_matrix(samples, "samples", min_rows=1)
    cov = _covariance(samples)
    max_modes = max(1, min(max_modes, samples.shape[0] // 10))
    degenerate = not np.any(np.abs(cov) > 0.0)

    norm = None
    if model is not None:
        step = score_step or max(1, model.schedule.n_steps // 4)
        norm = mean_score_norm(model, samples, step)

    return GeometryDescriptor(
        effective_dim=1.0 if degenerate else _participation_ratio(cov),
        mean_score_norm=norm,
        n_modes=1 if degenerate or samples.shape[0] < 10 else count_modes(samples, max_modes, restarts, seed),
        skewness=_skewness(samples),
        covariance=cov.tolist(),
        tail_mass=0.0 if degenerate else _tail_mass(samples, cov),
        mean=samples.mean(axis=0).tolist(),
    )
