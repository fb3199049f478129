"""
Sequential testing and estimation of the rank of the mean of a sample set.
"""
import dataclasses
import logging
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from marta.core import DegenerateVarianceError, RankDeficiencyError, RankInferenceError
from marta.linalg import GramTable, as_samples, gram_table
from marta.sparse_svd import SparseSvdOptions, sparse_svd, tune_lambda
from marta.stats import DiscrepancyMode, TestOutcome, g_hat, min_discrepancy


logger = logging.getLogger(__name__)


class RankMethod(Enum):
    """
    Represents a test for the rank of the mean.
    """
    #: Studentized U-statistic with sparse SVD factors
    PLUGIN_GN = 'plugin-gn'
    #: Studentized U-statistic with known factors
    ORACLE_GN = 'oracle-gn'
    #: Minimum discrepancy statistic with chi-square calibration
    MIN_DISCREPANCY_CHI2 = 'min-discrepancy-chi2'
    #: Minimum discrepancy statistic with normal calibration
    MIN_DISCREPANCY_NORMALIZED = 'min-discrepancy-normalized'

    @property
    def needs_gram(self) -> bool:
        """
        Whether the method evaluates its statistic on a Gram table of the
        samples.
        """
        return self in (RankMethod.PLUGIN_GN, RankMethod.ORACLE_GN)


@dataclasses.dataclass(frozen=True, eq=False)
class RankTestOptions:
    """
    Settings shared by all rank tests.

    :param svd: Sparse SVD settings; its penalty levels are used as they are when ``tune`` is false
    :param tune: Whether the penalty levels are selected by sample splitting
    :param tune_every_k: Whether the penalty levels are selected again for every tested rank
    :param grid_u: Candidate levels for the left factor, data-driven if omitted
    :param grid_v: Candidate levels for the right factor, data-driven if omitted
    :param grid_points: Size of data-driven grids
    :param split_fraction: Fraction of samples used for fitting during tuning
    :param oracle_u: Known left singular vectors, ordered, for the oracle test
    :param oracle_v: Known right singular vectors, ordered, for the oracle test
    :param sigma0_sq: Known noise variance for the minimum discrepancy tests
    :param trace_sigma2: Known ``tr(Σ²)`` for the U-statistic tests
    :param threads: Number of worker threads for tuning
    """
    svd: SparseSvdOptions = SparseSvdOptions()
    tune: bool = True
    tune_every_k: bool = False
    grid_u: Optional[Tuple[float, ...]] = None
    grid_v: Optional[Tuple[float, ...]] = None
    grid_points: int = 8
    split_fraction: float = 0.5
    oracle_u: Optional[np.ndarray] = None
    oracle_v: Optional[np.ndarray] = None
    sigma0_sq: Optional[float] = None
    trace_sigma2: Optional[float] = None
    threads: int = 1


class RankScanRecord(NamedTuple):
    """
    Record of a sequential rank estimation.
    """
    #: Smallest tested rank that was not rejected, or ``K_max + 1``
    estimated_rank: int
    #: ``(K, p_value)`` for every tested rank in increasing order
    pvalues: Tuple[Tuple[int, float], ...]
    method: RankMethod
    alpha: float
    K_max: int
    #: Whether every rank up to ``K_max`` was rejected
    truncated: bool
    outcomes: Tuple[TestOutcome, ...] = ()


def _tuned_svd_options(stacked: np.ndarray, K: int, options: RankTestOptions) -> SparseSvdOptions:
    penalty_u, penalty_v = tune_lambda(
        stacked, K, grid_u=options.grid_u, grid_v=options.grid_v, split_fraction=options.split_fraction,
        options=options.svd, grid_points=options.grid_points, threads=options.threads)
    logger.debug('Tuned penalties at K=%d: lambda_u=%g, lambda_v=%g', K, penalty_u.lam, penalty_v.lam)
    return dataclasses.replace(options.svd, penalty_u=penalty_u, penalty_v=penalty_v)


def _oracle_factors(K: int, options: RankTestOptions, q: int, p: int) -> Tuple[np.ndarray, np.ndarray]:
    if options.oracle_u is None or options.oracle_v is None:
        raise ValueError('The oracle test requires known singular vectors')
    U = np.asarray(options.oracle_u, dtype=float).reshape(q, -1)
    V = np.asarray(options.oracle_v, dtype=float).reshape(p, -1)
    if U.shape[1] < K or V.shape[1] < K:
        raise ValueError(f'Known singular vectors have fewer than K={K:d} columns')
    return U[:, :K], V[:, :K]


def _test(stacked: np.ndarray, K: int, alpha: float, method: RankMethod, options: RankTestOptions,
          gram: Optional[GramTable], svd_options: Optional[SparseSvdOptions]) -> TestOutcome:
    _, q, p = stacked.shape
    if method is RankMethod.MIN_DISCREPANCY_CHI2:
        return min_discrepancy(stacked, K, DiscrepancyMode.CHI2, alpha=alpha, sigma0_sq=options.sigma0_sq)
    if method is RankMethod.MIN_DISCREPANCY_NORMALIZED:
        return min_discrepancy(stacked, K, DiscrepancyMode.NORMALIZED, alpha=alpha, sigma0_sq=options.sigma0_sq)
    if K == 0:
        return g_hat(stacked, 0, alpha=alpha, trace_sigma2=options.trace_sigma2, gram=gram)
    if method is RankMethod.ORACLE_GN:
        U, V = _oracle_factors(K, options, q, p)
    else:
        if svd_options is None:
            svd_options = _tuned_svd_options(stacked, K, options) if options.tune else options.svd
        triplet = sparse_svd(stacked.mean(axis=0), K, svd_options).triplet
        U, V = triplet.U, triplet.V
    return g_hat(stacked, K, U, V, alpha=alpha, trace_sigma2=options.trace_sigma2, gram=gram)


def _check_preconditions(stacked: np.ndarray, alpha: float, k_max: int, method: RankMethod) -> None:
    n, q, p = stacked.shape
    if not 0 < alpha < 1:
        raise ValueError(f'Significance level must be in (0, 1): {alpha!r}')
    if not 0 <= k_max < min(q, p):
        raise ValueError(f'Invalid maximum rank for {q:d}x{p:d} samples: {k_max!r}')
    minimum = 4 if method.needs_gram else 2
    if n < minimum:
        raise ValueError(f'{method.value} requires at least {minimum:d} samples: {n:d}')


def test_rank_at(samples, K: int, alpha: float = 0.05, method: RankMethod = RankMethod.PLUGIN_GN,
                 options: Optional[RankTestOptions] = None) -> TestOutcome:
    """
    Tests whether the mean of the samples has rank at most ``K``.

    :param samples: Sequence of equally shaped matrices
    :param K: Rank under the null hypothesis
    :type K: int
    :param alpha: Significance level
    :type alpha: float
    :param method: Test to be used
    :type method: RankMethod
    :param options: Test settings
    :type options: RankTestOptions or None
    :return: Test outcome
    :rtype: TestOutcome
    :raises ValueError: if a precondition of the test is violated
    """
    method = RankMethod(method)
    options = options or RankTestOptions()
    stacked = as_samples(samples)
    _check_preconditions(stacked, alpha, K, method)
    gram = gram_table(stacked) if method.needs_gram else None
    return _test(stacked, K, alpha, method, options, gram, None)


# Not a test function for pytest collection
test_rank_at.__test__ = False


# Every step uses the unadjusted level; no correction for the sequence of
# tests is applied.
def estimate_rank(samples, alpha: float = 0.05, k_max: int = 5, method: RankMethod = RankMethod.PLUGIN_GN,
                  options: Optional[RankTestOptions] = None) -> RankScanRecord:
    """
    Estimates the rank of the mean as the smallest ``K`` in ``0, …, k_max``
    whose test does not reject.

    For the plug-in test the penalty levels are tuned once at ``K = 1`` and
    reused for higher ranks unless ``options.tune_every_k`` is set.

    :param samples: Sequence of equally shaped matrices
    :param alpha: Significance level of every step
    :type alpha: float
    :param k_max: Largest rank to be tested
    :type k_max: int
    :param method: Test to be used
    :type method: RankMethod
    :param options: Test settings
    :type options: RankTestOptions or None
    :return: Record of the sequential tests
    :rtype: RankScanRecord
    :raises ValueError: if a precondition of the test is violated
    :raises RankInferenceError: if a test fails for numerical reasons
    """
    method = RankMethod(method)
    options = options or RankTestOptions()
    stacked = as_samples(samples)
    _check_preconditions(stacked, alpha, k_max, method)
    gram = gram_table(stacked) if method.needs_gram else None

    outcomes = []
    svd_options: Optional[SparseSvdOptions] = None if options.tune else options.svd
    for K in range(k_max + 1):
        try:
            if method is RankMethod.PLUGIN_GN and K > 0 and (svd_options is None or options.tune_every_k):
                svd_options = _tuned_svd_options(stacked, K, options)
            outcome = _test(stacked, K, alpha, method, options, gram, svd_options)
        except (DegenerateVarianceError, RankDeficiencyError) as e:
            raise RankInferenceError(K, e) from e
        logger.debug('K=%d: statistic=%.6g, p-value=%.6g', K, outcome.statistic, outcome.p_value)
        outcomes.append(outcome)
        if not outcome.reject:
            break

    truncated = outcomes[-1].reject
    return RankScanRecord(
        estimated_rank=k_max + 1 if truncated else len(outcomes) - 1,
        pvalues=tuple((outcome.K_tested, outcome.p_value) for outcome in outcomes),
        method=method,
        alpha=alpha,
        K_max=k_max,
        truncated=truncated,
        outcomes=tuple(outcomes),
    )


def ranks_for_levels(record: RankScanRecord, alphas: Sequence[float]) -> Tuple[int, ...]:
    """
    Returns the rank estimates that the recorded p-value path yields at other
    significance levels. Levels above the recorded one may need tests that
    were never run; their estimate is the first untested rank.
    """
    ranks = []
    for alpha in alphas:
        accepted = [K for K, p_value in record.pvalues if not p_value < alpha]
        ranks.append(accepted[0] if accepted else len(record.pvalues))
    return tuple(ranks)
