"""
Test statistics for the rank of the mean of matrix-valued samples.

Every pairwise statistic is a function of the Gram table of the samples,
which is computed once per sample set.
"""
import math
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
import scipy.stats

from marta.core import DegenerateVarianceError
from marta.linalg import GramTable, as_samples, gram_table, singular_values

#: Tolerance on ‖UᵀU − I‖ for factors passed to the projected statistics
FACTOR_ORTHONORMALITY_TOL = 1e-6


class Reference(Enum):
    """
    Represents the reference distribution of a test statistic.
    """
    #: Standard normal, upper tail
    NORMAL = 'normal'
    #: Chi-square, upper tail
    CHI2 = 'chi2'


class DiscrepancyMode(Enum):
    """
    Represents the calibration of the minimum discrepancy statistic.
    """
    #: Fixed-dimension chi-square limit
    CHI2 = 'chi2'
    #: Centered and scaled statistic against the standard normal
    NORMALIZED = 'normalized'


class TestOutcome(NamedTuple):
    """
    Result of a single rank test.
    """
    __test__ = False

    statistic: float
    reference: Reference
    p_value: float
    alpha: float
    reject: bool
    K_tested: int
    #: Degrees of freedom of a chi-square reference
    df: Optional[int] = None


class TraceEstimate(NamedTuple):
    """
    Estimate of ``tr(Σ²)`` for the covariance ``Σ`` of the vectorized samples.
    """
    value: float
    n_used: int


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError(f'Significance level must be in (0, 1): {alpha!r}')


def _outcome(statistic: float, reference: Reference, p_value: float, alpha: float, K: int,
             df: Optional[int] = None) -> TestOutcome:
    return TestOutcome(statistic=float(statistic), reference=reference, p_value=float(p_value), alpha=alpha,
                       reject=bool(p_value < alpha), K_tested=K, df=df)


def normal_upper_pvalue(x: float) -> float:
    """
    Returns the upper tail probability of the standard normal distribution.
    """
    return float(scipy.stats.norm.sf(x))


def chi2_upper_pvalue(x: float, df: int) -> float:
    """
    Returns the upper tail probability of the chi-square distribution.

    :param x: Statistic
    :param df: Degrees of freedom, at least one
    :return: ``P(χ²_df ≥ x)``, one for nonpositive ``x``
    :rtype: float
    :raises ValueError: if ``df < 1``
    """
    if df < 1:
        raise ValueError(f'Invalid degrees of freedom: {df!r}')
    if x <= 0:
        return 1.0
    return float(scipy.stats.chi2.sf(x, df))


def u_n(gram: GramTable) -> float:
    """
    Returns the U-statistic ``Σ_{i≠j} tr(X_i X_jᵀ) / (n(n−1))``, an
    unbiased estimate of ``‖Π‖²`` for the common mean ``Π``.

    :param gram: Gram table of the samples
    :type gram: GramTable
    :return: U-statistic
    :rtype: float
    :raises ValueError: if there are fewer than two samples
    """
    n = gram.n
    if n < 2:
        raise ValueError(f'U-statistic requires at least 2 samples: {n:d}')
    G = gram.G
    return float((np.sum(G) - np.trace(G)) / (n * (n - 1)))


def _check_factor(factor: np.ndarray, rows: int, name: str) -> np.ndarray:
    factor = np.asarray(factor, dtype=float)
    if factor.ndim != 2 or factor.shape[0] != rows:
        raise ValueError(f'Factor {name} must have {rows:d} rows, got shape {factor.shape}')
    K = factor.shape[1]
    if K and np.linalg.norm(factor.T @ factor - np.eye(K)) > FACTOR_ORTHONORMALITY_TOL:
        raise ValueError(f'Factor {name} does not have orthonormal columns')
    return factor


def t_hat_sum(samples, U: np.ndarray, V: np.ndarray) -> float:
    """
    Returns the U-statistic of the projected samples ``Uᵀ X_i V``.

    With the true singular vectors this is the oracle estimate of
    ``Σ_{k≤K} σ_k²``; with estimated ones it is the plug-in estimate.

    :param samples: Sequence of q×p matrices
    :param U: Left factor of shape q×K with orthonormal columns
    :param V: Right factor of shape p×K with orthonormal columns
    :return: Sum of the projected signal estimates, zero for ``K = 0``
    :rtype: float
    :raises ValueError: if a factor is not orthonormal or does not match the samples
    """
    stacked = as_samples(samples)
    _, q, p = stacked.shape
    U = _check_factor(U, q, 'U')
    V = _check_factor(V, p, 'V')
    if U.shape[1] != V.shape[1]:
        raise ValueError(f'Factors have different ranks: {U.shape[1]:d} and {V.shape[1]:d}')
    if U.shape[1] == 0:
        return 0.0
    projected = U.T @ stacked @ V
    return u_n(gram_table(projected))


def trace_sigma2_hat(gram: GramTable) -> TraceEstimate:
    """
    Estimates ``tr(Σ²)`` from the Gram table.

    The estimate averages ``tr((X_i − X_k)(X_j − X_l)ᵀ)²/4`` over all
    distinct index quadruples and is therefore unbiased whatever the mean.
    It is evaluated in ``O(n²)`` from the row sums of the off-diagonal Gram
    entries. The value can be negative for small samples.

    :param gram: Gram table of the samples
    :type gram: GramTable
    :return: Trace estimate
    :rtype: TraceEstimate
    :raises ValueError: if there are fewer than four samples
    """
    n = gram.n
    if n < 4:
        raise ValueError(f'Trace estimation requires at least 4 samples: {n:d}')
    H = gram.G.copy()
    np.fill_diagonal(H, 0.0)
    pairs = np.sum(H ** 2)
    row_sums = H.sum(axis=1)
    total = row_sums.sum()
    paths = np.sum(row_sums ** 2) - pairs
    disjoint = total ** 2 - 2 * pairs - 4 * paths
    p2 = n * (n - 1)
    p3 = p2 * (n - 2)
    p4 = p3 * (n - 3)
    value = pairs / p2 - 2 * paths / p3 + disjoint / p4
    return TraceEstimate(value=float(value), n_used=n)


def kronecker_trace_sigma2(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """
    Returns ``tr((Σ₁ ⊗ Σ₂)²) = tr(Σ₁²)·tr(Σ₂²)`` for symmetric factors.

    :param sigma1: Column covariance of shape p×p
    :param sigma2: Row covariance of shape q×q
    :return: Trace of the squared Kronecker covariance
    :rtype: float
    """
    sigma1 = np.asarray(sigma1, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    return float(np.trace(sigma1 @ sigma1) * np.trace(sigma2 @ sigma2))


def g_hat(samples, K: int, U: Optional[np.ndarray] = None, V: Optional[np.ndarray] = None, *,
          alpha: float = 0.05, trace_sigma2: Optional[float] = None,
          gram: Optional[GramTable] = None) -> TestOutcome:
    """
    Tests whether the mean has rank at most ``K`` with the studentized
    U-statistic ``n(U_n − Σ T̂_k)/sqrt(2 tr(Σ²))``.

    Large values reject. Supplying the true factors and the true trace gives
    the oracle statistic. For ``K = 0`` the factors may be omitted and the
    statistic tests for a zero mean.

    :param samples: Sequence of at least four q×p matrices
    :param K: Rank under the null hypothesis
    :type K: int
    :param U: Left factor of shape q×K
    :param V: Right factor of shape p×K
    :param alpha: Significance level
    :type alpha: float
    :param trace_sigma2: Known ``tr(Σ²)``; estimated from the samples if omitted
    :type trace_sigma2: float or None
    :param gram: Precomputed Gram table of the samples
    :type gram: GramTable or None
    :return: Outcome against the upper tail of the standard normal
    :rtype: TestOutcome
    :raises ValueError: if there are fewer than four samples or the factors are invalid
    :raises DegenerateVarianceError: if the trace estimate is not positive
    """
    _check_alpha(alpha)
    stacked = as_samples(samples)
    n, q, p = stacked.shape
    if n < 4:
        raise ValueError(f'Test requires at least 4 samples: {n:d}')
    if U is None and V is None:
        if K != 0:
            raise ValueError(f'Factors are required for K={K:d}')
        U, V = np.zeros((q, 0)), np.zeros((p, 0))
    if U is None or V is None or np.shape(U)[1] != K or np.shape(V)[1] != K:
        raise ValueError(f'Factors must both have K={K:d} columns')
    gram = gram if gram is not None else gram_table(stacked)
    if trace_sigma2 is None:
        trace_sigma2 = trace_sigma2_hat(gram).value
        if not trace_sigma2 > 0:
            raise DegenerateVarianceError(f'Estimated tr(Sigma^2) is not positive: {trace_sigma2!r}')
    elif not trace_sigma2 > 0:
        raise ValueError(f'tr(Sigma^2) must be positive: {trace_sigma2!r}')
    numerator = u_n(gram) - t_hat_sum(stacked, U, V)
    statistic = n * numerator / math.sqrt(2 * trace_sigma2)
    return _outcome(statistic, Reference.NORMAL, normal_upper_pvalue(statistic), alpha, K)


def noise_variance_hat(samples) -> float:
    """
    Returns the pooled entrywise variance ``Σ (X_ijk − X̄_jk)² / (nqp)``.
    """
    stacked = as_samples(samples)
    return float(np.mean((stacked - stacked.mean(axis=0)) ** 2))


def min_discrepancy(samples, K: int, mode: DiscrepancyMode = DiscrepancyMode.CHI2,
                    rank_for_normalized: Optional[int] = None, *, alpha: float = 0.05,
                    sigma0_sq: Optional[float] = None) -> TestOutcome:
    """
    Tests whether the mean has rank at most ``K`` with the minimum
    discrepancy statistic ``T_K = n Σ_{k>K} σ_k(X̄)² / σ₀²``.

    In ``CHI2`` mode ``T_K`` is compared to the chi-square distribution with
    ``(q−K)(p−K)`` degrees of freedom. In ``NORMALIZED`` mode the statistic
    ``(T_K − d)/sqrt(2d)`` with ``d = (q−R)(p−R)`` is compared to the upper
    tail of the standard normal, where ``R`` defaults to ``K``.

    :param samples: Sequence of at least two q×p matrices
    :param K: Rank under the null hypothesis
    :type K: int
    :param mode: Calibration
    :type mode: DiscrepancyMode
    :param rank_for_normalized: Rank ``R`` used for centering in normalized mode
    :type rank_for_normalized: int or None
    :param alpha: Significance level
    :type alpha: float
    :param sigma0_sq: Known noise variance; estimated from the samples if omitted
    :type sigma0_sq: float or None
    :return: Test outcome
    :rtype: TestOutcome
    :raises ValueError: if there are fewer than two samples or ``K ≥ min(q, p)``
    :raises DegenerateVarianceError: if the estimated noise variance is not positive
    """
    _check_alpha(alpha)
    mode = DiscrepancyMode(mode)
    stacked = as_samples(samples)
    n, q, p = stacked.shape
    if n < 2:
        raise ValueError(f'Test requires at least 2 samples: {n:d}')
    if not 0 <= K < min(q, p):
        raise ValueError(f'Invalid rank for {q:d}x{p:d} samples: {K!r}')
    if sigma0_sq is None:
        sigma0_sq = noise_variance_hat(stacked)
        if not sigma0_sq > 0:
            raise DegenerateVarianceError('Samples are constant, noise variance is zero')
    elif not sigma0_sq > 0:
        raise ValueError(f'Noise variance must be positive: {sigma0_sq!r}')

    sigma = singular_values(stacked.mean(axis=0))
    statistic = n * float(np.sum(sigma[K:] ** 2)) / sigma0_sq
    if mode is DiscrepancyMode.CHI2:
        df = (q - K) * (p - K)
        return _outcome(statistic, Reference.CHI2, chi2_upper_pvalue(statistic, df), alpha, K, df=df)

    R = K if rank_for_normalized is None else rank_for_normalized
    if not 0 <= R < min(q, p):
        raise ValueError(f'Invalid centering rank for {q:d}x{p:d} samples: {R!r}')
    df = (q - R) * (p - R)
    normalized = (statistic - df) / math.sqrt(2 * df)
    return _outcome(normalized, Reference.NORMAL, normal_upper_pvalue(normalized), alpha, K, df=df)
