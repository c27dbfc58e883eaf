import numpy as np
import pytest
from scipy.linalg import hadamard

from mcncc.errors import DimensionMismatchError, McnccError, NumericalError
from mcncc.tensor import FeatureMap
from mcncc.whiten import (
    Projection,
    apply_projection,
    fit_cca,
    fit_pca,
    pixel_samples,
)


def exactly_white_samples(m=16, n=4):
    """Rows with empirical mean exactly 0 and covariance exactly I.

    Hadamard columns are mutually orthogonal with entries +-1, so all
    the sums involved are exact in float arithmetic.
    """
    h = hadamard(m).astype(np.float64)
    return h[:, 1 : n + 1]  # skip the all-ones column to get zero means


def empirical_cov(samples):
    centered = samples - samples.mean(axis=0)
    return centered.T @ centered / samples.shape[0]


class TestFitPca:
    def test_white_data_gives_signed_permutation(self):
        samples = exactly_white_samples(16, 4)
        proj = fit_pca(samples, k=4, ridge=0.0)
        # Each row of the projection is +- a coordinate axis.
        abs_mat = np.abs(proj.matrix)
        assert np.allclose(abs_mat @ abs_mat.T, np.eye(4), atol=1e-6)
        assert np.allclose(np.sort(abs_mat.max(axis=1)), 1.0, atol=1e-6)
        projected = (samples - proj.mean) @ proj.matrix.T
        assert np.allclose(empirical_cov(projected), np.eye(4), atol=1e-6)

    def test_diagonal_covariance_closed_form(self):
        # Scale exactly-white 2-D data to covariance diag(4, 1): the two
        # component scales must come out 1/2 and 1.
        samples = exactly_white_samples(16, 2) * np.array([2.0, 1.0])
        proj = fit_pca(samples, k=2, ridge=0.0)
        projected = (samples - proj.mean) @ proj.matrix.T
        assert np.allclose(empirical_cov(projected), np.eye(2), atol=1e-6)
        norms = np.linalg.norm(proj.matrix, axis=1)
        np.testing.assert_allclose(norms, [0.5, 1.0], atol=1e-9)

    def test_k1_finds_max_variance_direction(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((500, 2)) * np.array([3.0, 0.5])
        angle = 0.7
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        samples = base @ rot.T
        proj = fit_pca(samples, k=1, ridge=0.0)
        direction = proj.matrix[0] / np.linalg.norm(proj.matrix[0])
        # Sampling oracle: variance along a sweep of unit vectors.
        centered = samples - samples.mean(axis=0)
        best, best_var = None, -1.0
        for theta in np.linspace(0, np.pi, 3600, endpoint=False):
            u = np.array([np.cos(theta), np.sin(theta)])
            var = np.mean((centered @ u) ** 2)
            if var > best_var:
                best, best_var = u, var
        assert min(np.linalg.norm(direction - best), np.linalg.norm(direction + best)) < 5e-3

    def test_k_exceeding_dimension_rejected(self):
        with pytest.raises(DimensionMismatchError):
            fit_pca(np.zeros((10, 3)), k=4)

    def test_rank_deficiency_without_ridge(self):
        rng = np.random.default_rng(1)
        col = rng.standard_normal((20, 1))
        samples = np.hstack([col, col])  # rank 1 in 2-D
        with pytest.raises(NumericalError):
            fit_pca(samples, k=2, ridge=0.0)

    def test_decorrelates_training_pixels(self):
        rng = np.random.default_rng(2)
        mixing = rng.standard_normal((4, 4))
        maps = [
            FeatureMap(np.einsum("kn,nhw->khw", mixing, rng.standard_normal((4, 10, 10))))
            for _ in range(5)
        ]
        samples = pixel_samples(maps)
        proj = fit_pca(samples, k=4, ridge=0.0)
        projected = (samples - proj.mean) @ proj.matrix.T
        cov = empirical_cov(projected)
        off = cov - np.diag(np.diag(cov))
        assert np.max(np.abs(off)) < 1e-4
        assert np.allclose(np.diag(cov), 1.0, atol=1e-4)


class TestFitCca:
    def test_identical_domains_give_unit_correlations(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((300, 5))
        result = fit_cca(x, x.copy(), k=5, ridge=0.0)
        np.testing.assert_allclose(result.correlations, 1.0, atol=1e-6)

    def test_invertible_linear_relation(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((400, 4))
        r = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
        y = x @ r.T
        result = fit_cca(x, y, k=4, ridge=0.0)
        np.testing.assert_allclose(result.correlations, 1.0, atol=1e-6)

    def test_permuted_pairs_kill_correlations(self):
        # Null-distribution oracle: break the pairing and the canonical
        # correlations collapse.
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1000, 8))
        y = x @ rng.standard_normal((8, 8)).T
        paired = fit_cca(x, y, k=4, ridge=0.0)
        assert paired.correlations.min() > 0.999
        shuffled = fit_cca(x, y[rng.permutation(1000)], k=4, ridge=0.0)
        assert shuffled.correlations.max() < 0.25

    def test_projected_training_data_is_white(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((500, 4)) @ rng.standard_normal((4, 4))
        y = rng.standard_normal((500, 3)) @ rng.standard_normal((3, 3))
        result = fit_cca(x, y, k=3, ridge=0.0)
        for samples, proj in ((x, result.proj_x), (y, result.proj_y)):
            projected = (samples - proj.mean) @ proj.matrix.T
            assert np.allclose(empirical_cov(projected), np.eye(3), atol=1e-4)

    def test_affine_reparameterization_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((400, 4))
        y = rng.standard_normal((400, 4)) + 0.5 * x
        base = fit_cca(x, y, k=4, ridge=0.0)
        m = rng.standard_normal((4, 4)) + 3.0 * np.eye(4)
        again = fit_cca(x @ m.T + 2.0, y, k=4, ridge=0.0)
        np.testing.assert_allclose(again.correlations, base.correlations, atol=1e-6)

    def test_correlations_non_increasing(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((300, 6))
        y = 0.8 * x + 0.4 * rng.standard_normal((300, 6))
        result = fit_cca(x, y, k=6, ridge=0.0)
        assert np.all(np.diff(result.correlations) <= 1e-12)

    def test_insufficient_pairs_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(McnccError):
            fit_cca(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), k=3)

    def test_row_count_mismatch(self):
        rng = np.random.default_rng(10)
        with pytest.raises(DimensionMismatchError):
            fit_cca(rng.standard_normal((10, 3)), rng.standard_normal((11, 3)), k=2)


class TestApplyProjection:
    def test_identity_projection(self):
        rng = np.random.default_rng(11)
        fm = FeatureMap(rng.standard_normal((3, 5, 5)))
        out = apply_projection(fm, Projection.identity(3))
        np.testing.assert_array_equal(out.values, fm.values)

    def test_mean_only_projection(self):
        rng = np.random.default_rng(12)
        fm = FeatureMap(rng.standard_normal((2, 4, 4)))
        mean = np.array([1.0, -2.0])
        out = apply_projection(fm, Projection(np.eye(2), mean))
        np.testing.assert_allclose(out.values, fm.values - mean[:, None, None], atol=1e-12)

    def test_pca_projection_whitens_own_pixels(self):
        rng = np.random.default_rng(13)
        mixing = rng.standard_normal((3, 3))
        maps = [
            FeatureMap(np.einsum("kn,nhw->khw", mixing, rng.standard_normal((3, 12, 12))))
            for _ in range(4)
        ]
        proj = fit_pca(pixel_samples(maps), k=3, ridge=0.0, domain_tag="whitened")
        projected = [apply_projection(m, proj) for m in maps]
        assert all(p.domain_tag == "whitened" for p in projected)
        cov = empirical_cov(pixel_samples(projected))
        assert np.allclose(cov, np.eye(3), atol=1e-4)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(14)
        fm = FeatureMap(rng.standard_normal((3, 4, 4)))
        with pytest.raises(DimensionMismatchError):
            apply_projection(fm, Projection.identity(2))
