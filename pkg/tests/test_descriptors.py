import numpy as np
import pytest

from abmlens.descriptors import (
    GeometryDescriptor,
    count_modes,
    divergence,
    effective_dimensionality,
    mean_score_norm,
    shape_summary,
)
from abmlens.diffusion import TrainConfig, build_model, train


def test_isotropic_gaussian_uses_every_dimension(rng):
    assert effective_dimensionality(rng.standard_normal((5000, 3))) == pytest.approx(3.0, abs=0.2)


def test_points_on_a_line_have_one_dimension(rng):
    t = rng.standard_normal(500)
    assert effective_dimensionality(np.column_stack([t, t])) == pytest.approx(1.0)


def test_effective_dimensionality_is_rotation_invariant(rng):
    samples = rng.standard_normal((1000, 2)) * [3.0, 1.0]
    angle = 0.7
    rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    assert effective_dimensionality(samples @ rotation.T) == pytest.approx(effective_dimensionality(samples))


def test_identical_points_have_dimension_one():
    assert effective_dimensionality(np.ones((10, 3))) == 1.0


def test_effective_dimensionality_needs_enough_samples(rng):
    with pytest.raises(ValueError, match="at least 4 samples"):
        effective_dimensionality(rng.standard_normal((3, 3)))


def test_single_blob_has_one_mode(rng):
    assert count_modes(rng.standard_normal((600, 2)), 3, restarts=5) == 1


def test_two_separated_blobs_have_two_modes(rng):
    blobs = np.vstack([rng.standard_normal((300, 2)) - 5.0, rng.standard_normal((300, 2)) + 5.0])
    assert count_modes(blobs, 3, restarts=5) == 2


def test_mode_count_ignores_units(rng):
    blobs = np.vstack([rng.standard_normal((300, 1)) - 5.0, rng.standard_normal((300, 1)) + 5.0])
    assert count_modes(blobs * 1000.0 + 7.0, 3, restarts=5) == count_modes(blobs, 3, restarts=5)


def test_count_modes_needs_enough_samples(rng):
    with pytest.raises(ValueError, match="at least 30 samples"):
        count_modes(rng.standard_normal((20, 2)), 3)


def test_sliced_wasserstein_of_a_set_with_itself_is_zero(rng):
    samples = rng.standard_normal((300, 3))
    assert divergence(samples, samples, "wasserstein1_sliced") == 0.0


def test_sliced_wasserstein_recovers_a_shift(rng):
    a = rng.standard_normal((4000, 1))
    b = rng.standard_normal((4000, 1)) + 1.0
    assert divergence(a, b, "wasserstein1_sliced") == pytest.approx(1.0, abs=0.1)


def test_kl_of_same_distribution_is_near_zero(rng):
    a = rng.standard_normal((2000, 2))
    b = rng.standard_normal((2000, 2))
    assert abs(divergence(a, b, "kl_knn")) < 0.1


def test_kl_grows_with_separation(rng):
    a = rng.standard_normal((1000, 2))
    near = divergence(a, rng.standard_normal((1000, 2)) + 0.5, "kl_knn")
    far = divergence(a, rng.standard_normal((1000, 2)) + 2.0, "kl_knn")
    assert far > near


def test_divergence_checks_dimensions_and_metric(rng):
    with pytest.raises(ValueError, match="dimension"):
        divergence(rng.standard_normal((50, 2)), rng.standard_normal((50, 3)))
    with pytest.raises(ValueError, match="metric"):
        divergence(rng.standard_normal((50, 2)), rng.standard_normal((50, 2)), "energy")


def test_mean_score_norm_of_untrained_model_is_zero(rng):
    assert mean_score_norm(build_model(2), rng.standard_normal((20, 2)), 50) == 0.0


def test_shape_summary_of_gaussian(rng):
    samples = rng.standard_normal((3000, 2))
    summary = shape_summary(samples, restarts=3)
    assert isinstance(summary, GeometryDescriptor)
    assert summary.n_modes == 1
    assert summary.mean_score_norm is None
    assert summary.tail_mass < 0.02
    np.testing.assert_allclose(summary.covariance, np.eye(2), atol=0.1)
    np.testing.assert_allclose(summary.skewness, [0.0, 0.0], atol=0.15)


def test_shape_summary_with_model_reports_score_norm(rng):
    samples = rng.standard_normal((300, 2))
    model = train(samples, TrainConfig(epochs=2, hidden_width=8, n_hidden=1))
    summary = shape_summary(samples, model, restarts=2)
    assert summary.mean_score_norm is not None
    assert summary.mean_score_norm >= 0.0


def test_shape_summary_of_degenerate_samples():
    summary = shape_summary(np.full((40, 3), 0.25))
    assert summary.effective_dim == 1.0
    assert summary.n_modes == 1
    assert summary.tail_mass == 0.0
    assert summary.skewness == [0.0, 0.0, 0.0]


def test_gaussian_three_sigma_tail_mass(rng):
    summary = shape_summary(rng.standard_normal((100_000, 1)), max_modes=1)
    assert summary.tail_mass == pytest.approx(0.0027, abs=0.001)


def test_sliced_wasserstein_is_a_metric(rng):
    a, b, c = (rng.standard_normal((400, 2)) + shift for shift in (0.0, 0.7, -1.2))
    ab = divergence(a, b, "wasserstein1_sliced")
    assert ab == pytest.approx(divergence(b, a, "wasserstein1_sliced"), abs=1e-9)
    assert divergence(a, c, "wasserstein1_sliced") <= ab + divergence(b, c, "wasserstein1_sliced") + 1e-9


def test_mode_count_ignores_translation_and_scale(rng):
    blobs = np.vstack([rng.standard_normal((300, 2)) - 4.0, rng.standard_normal((300, 2)) + 4.0])
    moved = 0.01 * blobs + np.array([50.0, -20.0])
    assert count_modes(moved, 3, restarts=5) == count_modes(blobs, 3, restarts=5) == 2


def test_kl_of_a_sample_with_itself_is_exactly_zero(rng):
    samples = np.clip(rng.standard_normal((500, 2)), -1.0, 1.0)
    assert divergence(samples, samples, "kl_knn") == 0.0


def test_kl_stays_moderate_on_clipped_samples(rng):
    a = np.clip(rng.standard_normal((2000, 1)), -1.0, 1.0)
    b = np.clip(rng.standard_normal((2000, 1)), -1.0, 1.0)
    estimate = divergence(a, b, "kl_knn")
    assert np.isfinite(estimate)
    assert abs(estimate) < 0.3
