import itertools
import math

import numpy as np
import pytest

from marta.core import DegenerateVarianceError
from marta.linalg import gram_table, thin_svd
from marta.simulation import custom_model, draw_sample, make_rng, replication_seed
from marta.stats import DiscrepancyMode, Reference, chi2_upper_pvalue, g_hat, kronecker_trace_sigma2, \
    min_discrepancy, noise_variance_hat, normal_upper_pvalue, t_hat_sum, trace_sigma2_hat, u_n
from assets import sparse_rank_one_mean
from assets import null_samples, rank_one_samples


def brute_u_n(samples):
    n = len(samples)
    total = sum(np.trace(samples[i] @ samples[j].T) for i in range(n) for j in range(n) if i != j)
    return total / (n * (n - 1))


def brute_trace_sigma2(samples):
    n = len(samples)
    G = np.array([[np.trace(a @ b.T) for b in samples] for a in samples])
    pairs = sum(G[i, j] ** 2 for i, j in itertools.permutations(range(n), 2))
    paths = sum(G[i, j] * G[j, k] for i, j, k in itertools.permutations(range(n), 3))
    disjoint = sum(G[i, j] * G[k, l] for i, j, k, l in itertools.permutations(range(n), 4))
    p2 = n * (n - 1)
    p3 = p2 * (n - 2)
    p4 = p3 * (n - 3)
    return pairs / p2 - 2 * paths / p3 + disjoint / p4


def random_instance(rng):
    n = int(rng.integers(4, 9))
    q = int(rng.integers(2, 7))
    p = int(rng.integers(2, 7))
    mean = rng.standard_normal((q, p))
    return mean + rng.standard_normal((n, q, p))


class TestPValues:
    def test_normal_upper_tail_at_zero_is_half(self):
        assert normal_upper_pvalue(0.0) == pytest.approx(0.5)

    def test_chi2_upper_tail_has_closed_form_for_four_degrees_of_freedom(self):
        assert chi2_upper_pvalue(4.0, 4) == pytest.approx(3 * math.exp(-2))

    @pytest.mark.parametrize('x', [1.0, 5.0, 20.0])
    def test_chi2_upper_tail_has_closed_form_for_two_degrees_of_freedom(self, x):
        assert chi2_upper_pvalue(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-10)

    def test_chi2_upper_tail_of_nonpositive_statistic_is_one(self):
        assert chi2_upper_pvalue(0.0, 3) == 1.0
        assert chi2_upper_pvalue(-1.0, 3) == 1.0

    def test_chi2_raises_error_for_invalid_degrees_of_freedom(self):
        with pytest.raises(ValueError):
            chi2_upper_pvalue(1.0, 0)


class TestGramStatistics:
    def test_fast_statistics_match_definitions(self):
        rng = make_rng(30)
        for _ in range(100):
            samples = random_instance(rng)
            gram = gram_table(samples)
            K = int(rng.integers(1, min(samples.shape[1:]) + 1))
            triplet = thin_svd(samples.mean(axis=0), K)
            projected = np.einsum('qk,nqp,pl->nkl', triplet.U, samples, triplet.V)

            assert u_n(gram) == pytest.approx(brute_u_n(samples), rel=1e-8, abs=1e-10)
            assert t_hat_sum(samples, triplet.U, triplet.V) == pytest.approx(brute_u_n(projected), rel=1e-8,
                                                                              abs=1e-10)
            assert trace_sigma2_hat(gram).value == pytest.approx(brute_trace_sigma2(samples), rel=1e-8,
                                                                 abs=1e-10)

    def test_trace_estimate_is_unbiased_with_nonzero_mean(self):
        rng = make_rng(31)
        mean = np.full((3, 3), 0.5)
        estimates = [trace_sigma2_hat(gram_table(mean + rng.standard_normal((10, 3, 3)))).value
                     for _ in range(2000)]

        assert np.mean(estimates) == pytest.approx(9.0, rel=0.05)

    def test_u_n_raises_error_for_single_sample(self):
        with pytest.raises(ValueError):
            u_n(gram_table(np.zeros((1, 2, 2))))

    def test_trace_estimate_raises_error_for_three_samples(self):
        with pytest.raises(ValueError):
            trace_sigma2_hat(gram_table(np.ones((3, 2, 2))))

    def test_t_hat_sum_is_zero_without_factors(self, null_samples):
        assert t_hat_sum(null_samples, np.zeros((12, 0)), np.zeros((10, 0))) == 0.0

    def test_t_hat_sum_raises_error_for_non_orthonormal_factor(self, null_samples):
        U = np.ones((12, 1))
        V = np.eye(10)[:, :1]

        with pytest.raises(ValueError):
            t_hat_sum(null_samples, U, V)

    def test_kronecker_trace_of_identities_is_product_of_dimensions(self):
        assert kronecker_trace_sigma2(np.eye(4), np.eye(3)) == pytest.approx(12.0)


@pytest.mark.usefixtures('rank_one_samples', 'null_samples')
class TestGHat:
    def test_zero_mean_test_accepts_pure_noise(self, null_samples):
        outcome = g_hat(null_samples, 0, alpha=0.001)

        assert outcome.reference is Reference.NORMAL
        assert outcome.K_tested == 0
        assert not outcome.reject

    def test_rank_zero_is_rejected_for_signal(self, rank_one_samples):
        outcome = g_hat(rank_one_samples, 0)

        assert outcome.reject
        assert outcome.p_value < 1e-6

    def test_rank_one_with_true_factors_is_accepted(self, rank_one_samples):
        truth = thin_svd(sparse_rank_one_mean(), 1)

        outcome = g_hat(rank_one_samples, 1, truth.U, truth.V, alpha=0.001)

        assert not outcome.reject

    def test_statistic_is_invariant_under_intensity_scaling(self, rank_one_samples):
        truth = thin_svd(sparse_rank_one_mean(), 1)

        original = g_hat(rank_one_samples, 1, truth.U, truth.V)
        scaled = g_hat(3.5 * rank_one_samples, 1, truth.U, truth.V)

        assert scaled.statistic == pytest.approx(original.statistic, rel=1e-8)

    def test_known_trace_replaces_estimate(self, null_samples):
        outcome = g_hat(null_samples, 0, trace_sigma2=120.0)
        gram = gram_table(null_samples)

        expected = len(null_samples) * u_n(gram) / math.sqrt(2 * 120.0)
        assert outcome.statistic == pytest.approx(expected)

    def test_raises_error_for_nonpositive_known_trace(self, null_samples):
        with pytest.raises(ValueError):
            g_hat(null_samples, 0, trace_sigma2=0.0)

    def test_raises_error_for_degenerate_trace_estimate(self):
        with pytest.raises(DegenerateVarianceError):
            g_hat(np.zeros((5, 3, 3)), 0)

    def test_raises_error_when_factors_are_missing(self, null_samples):
        with pytest.raises(ValueError):
            g_hat(null_samples, 1)

    def test_raises_error_for_three_samples(self, null_samples):
        with pytest.raises(ValueError):
            g_hat(null_samples[:3], 0)

    @pytest.mark.parametrize('alpha', [0.0, 1.0])
    def test_raises_error_for_invalid_level(self, null_samples, alpha):
        with pytest.raises(ValueError):
            g_hat(null_samples, 0, alpha=alpha)


class TestMinDiscrepancy:
    @pytest.fixture(name='samples', scope='class')
    def diagonal_mean_samples(self):
        mean = np.diag([3.0, 1.0, 0.0])
        offsets = np.array([1.0, -1.0, 1.0, -1.0])[:, np.newaxis, np.newaxis] * np.eye(3)[2]
        return mean + offsets

    def test_chi2_mode_uses_trailing_singular_values(self, samples):
        outcome = min_discrepancy(samples, 1, sigma0_sq=1.0)

        assert outcome.statistic == pytest.approx(4.0)
        assert outcome.df == 4
        assert outcome.reference is Reference.CHI2
        assert outcome.p_value == pytest.approx(3 * math.exp(-2))

    def test_normalized_mode_centers_and_scales_statistic(self, samples):
        outcome = min_discrepancy(samples, 1, DiscrepancyMode.NORMALIZED, sigma0_sq=1.0)

        assert outcome.statistic == pytest.approx(0.0, abs=1e-12)
        assert outcome.p_value == pytest.approx(0.5)

    def test_statistic_is_tail_of_singular_values_with_known_variance(self):
        samples = np.repeat(np.diag([3.0, 2.0])[np.newaxis], 10, axis=0)

        outcome = min_discrepancy(samples, 1, sigma0_sq=1.0)

        assert outcome.statistic == pytest.approx(40.0)
        assert outcome.df == 1

    def test_mean_of_exact_rank_gives_zero_statistic(self):
        samples = np.diag([3.0, 0.0]) + np.array([1.0, -1.0, 1.0])[:, np.newaxis, np.newaxis] * np.eye(2)[0]

        outcome = min_discrepancy(samples, 1, sigma0_sq=1.0)

        assert outcome.statistic == pytest.approx(0.0, abs=1e-12)
        assert outcome.p_value == pytest.approx(1.0)
        assert not outcome.reject

    def test_noise_variance_is_pooled_entrywise_variance(self, samples):
        assert noise_variance_hat(samples) == pytest.approx(3 / 9)

    def test_raises_error_for_constant_samples(self):
        with pytest.raises(DegenerateVarianceError):
            min_discrepancy(np.ones((4, 3, 3)), 0)

    def test_raises_error_for_rank_at_dimension(self, samples):
        with pytest.raises(ValueError):
            min_discrepancy(samples, 3)

    def test_raises_error_for_single_sample(self, samples):
        with pytest.raises(ValueError):
            min_discrepancy(samples[:1], 0)


@pytest.mark.slow
class TestLimitingDistributions:
    def test_normalized_discrepancy_statistic_is_asymptotically_standard_normal(self):
        mean = np.zeros((5, 5))
        mean[0, 0] = 5.0
        model = custom_model(mean, n=2000)
        statistics = []
        for replication in range(2000):
            samples = draw_sample(model, replication_seed(0, 0, replication))
            outcome = min_discrepancy(samples, 1, DiscrepancyMode.NORMALIZED, sigma0_sq=1.0)
            statistics.append(outcome.statistic)

        statistics = np.array(statistics)
        assert abs(np.mean(statistics)) < 0.1
        assert 0.85 <= np.var(statistics) <= 1.15
        assert np.mean(statistics > 1.6448536269514722) == pytest.approx(0.05, abs=0.025)

    def test_oracle_statistic_has_nominal_size_under_null(self):
        model = custom_model(sparse_rank_one_mean(q=20, p=20), n=60)
        truth = thin_svd(model.mean, 1)
        rejections = 0
        for replication in range(400):
            samples = draw_sample(model, replication_seed(1, 0, replication))
            rejections += g_hat(samples, 1, truth.U, truth.V).reject

        assert rejections / 400 == pytest.approx(0.05, abs=0.035)

    def test_trace_estimate_is_ratio_consistent_for_identity_covariance(self):
        model = custom_model(np.zeros((20, 20)), n=200)
        within = 0
        for replication in range(200):
            samples = draw_sample(model, replication_seed(2, 0, replication))
            estimate = trace_sigma2_hat(gram_table(samples)).value
            within += abs(estimate / 400.0 - 1.0) <= 0.15

        assert within >= 0.95 * 200
