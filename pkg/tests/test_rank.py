import numpy as np
import pytest

from marta.core import DegenerateVarianceError, RankInferenceError
from marta.linalg import thin_svd
from marta.penalty import PenaltySpec
from marta.rank import RankMethod, RankScanRecord, RankTestOptions, estimate_rank, ranks_for_levels, test_rank_at
from marta.sparse_svd import SparseSvdOptions
from assets import sparse_rank_one_mean, sparse_rank_two_mean
from assets import null_samples, rank_one_samples, rank_two_samples


def oracle_options(mean, K):
    truth = thin_svd(mean, K)
    return RankTestOptions(oracle_u=truth.U, oracle_v=truth.V)


class TestRankMethod:
    def test_method_is_parsed_from_label(self):
        assert RankMethod('min-discrepancy-chi2') is RankMethod.MIN_DISCREPANCY_CHI2

    def test_only_u_statistic_methods_need_gram_table(self):
        assert RankMethod.PLUGIN_GN.needs_gram
        assert RankMethod.ORACLE_GN.needs_gram
        assert not RankMethod.MIN_DISCREPANCY_NORMALIZED.needs_gram


@pytest.mark.usefixtures('rank_two_samples', 'null_samples')
class TestEstimateRank:
    def test_plugin_test_finds_two_sparse_components(self, rank_two_samples):
        record = estimate_rank(rank_two_samples, alpha=0.01, k_max=4)

        assert record.estimated_rank == 2
        assert not record.truncated
        assert [K for K, _ in record.pvalues] == [0, 1, 2]
        assert len(record.outcomes) == 3

    def test_plugin_test_with_fixed_levels_skips_tuning(self, rank_two_samples):
        svd = SparseSvdOptions(penalty_u=PenaltySpec(lam=0.3), penalty_v=PenaltySpec(lam=0.3))

        record = estimate_rank(rank_two_samples, alpha=0.01, options=RankTestOptions(svd=svd, tune=False))

        assert record.estimated_rank == 2

    def test_tuning_for_every_rank_gives_valid_record(self, rank_two_samples):
        record = estimate_rank(rank_two_samples, alpha=0.01, options=RankTestOptions(tune_every_k=True))

        assert record.estimated_rank == 2

    def test_oracle_test_finds_true_rank(self, rank_two_samples):
        options = oracle_options(sparse_rank_two_mean(), 3)

        record = estimate_rank(rank_two_samples, alpha=0.01, method=RankMethod.ORACLE_GN, options=options)

        assert record.estimated_rank == 2
        assert record.method is RankMethod.ORACLE_GN

    def test_min_discrepancy_with_known_variance_finds_true_rank(self, rank_two_samples):
        record = estimate_rank(rank_two_samples, alpha=0.01, method=RankMethod.MIN_DISCREPANCY_CHI2,
                               options=RankTestOptions(sigma0_sq=0.25))

        assert record.estimated_rank == 2

    def test_pure_noise_has_rank_zero(self, null_samples):
        record = estimate_rank(null_samples, alpha=0.001)

        assert record.estimated_rank == 0
        assert len(record.pvalues) == 1

    def test_record_is_truncated_when_every_rank_is_rejected(self, rank_two_samples):
        record = estimate_rank(rank_two_samples, alpha=0.05, k_max=1)

        assert record.truncated
        assert record.estimated_rank == 2
        assert record.K_max == 1
        assert all(outcome.reject for outcome in record.outcomes)

    def test_single_test_matches_first_sequential_step(self, rank_two_samples):
        record = estimate_rank(rank_two_samples, method=RankMethod.MIN_DISCREPANCY_NORMALIZED)

        outcome = test_rank_at(rank_two_samples, 0, method=RankMethod.MIN_DISCREPANCY_NORMALIZED)

        assert outcome == record.outcomes[0]

    def test_numerical_failure_is_reported_with_rank(self):
        with pytest.raises(RankInferenceError) as excinfo:
            estimate_rank(np.zeros((6, 4, 4)), k_max=2)

        assert excinfo.value.k == 0
        assert isinstance(excinfo.value.cause, DegenerateVarianceError)

    @pytest.mark.parametrize('alpha, k_max', [(0.0, 2), (1.5, 2), (0.05, 10), (0.05, -1)])
    def test_raises_error_for_invalid_arguments(self, rank_two_samples, alpha, k_max):
        with pytest.raises(ValueError):
            estimate_rank(rank_two_samples, alpha=alpha, k_max=k_max)

    def test_raises_error_for_too_few_samples(self, rank_two_samples):
        with pytest.raises(ValueError):
            estimate_rank(rank_two_samples[:3])

    def test_min_discrepancy_accepts_two_samples(self, rank_two_samples):
        record = estimate_rank(rank_two_samples[:2], method=RankMethod.MIN_DISCREPANCY_CHI2, k_max=1)

        assert record.estimated_rank in (0, 1, 2)

    def test_oracle_test_raises_error_without_factors(self, rank_two_samples):
        with pytest.raises(ValueError):
            estimate_rank(rank_two_samples, method=RankMethod.ORACLE_GN)


@pytest.mark.usefixtures('rank_one_samples')
class TestRankAt:
    def test_true_rank_is_not_rejected_by_oracle_test(self, rank_one_samples):
        options = oracle_options(sparse_rank_one_mean(), 1)

        outcome = test_rank_at(rank_one_samples, 1, alpha=0.001, method=RankMethod.ORACLE_GN, options=options)

        assert outcome.K_tested == 1
        assert not outcome.reject

    def test_too_small_rank_is_rejected_by_plugin_test(self, rank_one_samples):
        outcome = test_rank_at(rank_one_samples, 0)

        assert outcome.reject


class TestRanksForLevels:
    def test_ranks_follow_recorded_p_values(self):
        record = RankScanRecord(estimated_rank=2, pvalues=((0, 1e-9), (1, 0.02), (2, 0.4)),
                                method=RankMethod.PLUGIN_GN, alpha=0.05, K_max=5, truncated=False)

        ranks = ranks_for_levels(record, [0.01, 0.05, 0.5])

        assert ranks == (1, 2, 3)
