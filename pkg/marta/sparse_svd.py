"""
Sparse singular value decomposition by alternating penalized regressions
with QR re-orthonormalization, and tuning of the penalty levels by sample
splitting.
"""
import concurrent.futures
import dataclasses
import itertools
import logging
import math
from typing import FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from marta.core import PenaltyTooAggressiveError, RankDeficiencyError
from marta.linalg import SvdTriplet, apply_sign_convention, as_matrix, as_samples, projector_distance, \
    qr_orthonormalize, thin_svd
from marta.penalty import PenaltySpec, penalty_value, threshold_rows


logger = logging.getLogger(__name__)

#: Relative tolerance for an increase of the penalized objective between updates
OBJECTIVE_SLACK = 1e-10


@dataclasses.dataclass(frozen=True)
class SparseSvdOptions:
    """
    Settings of the alternating sparse SVD.

    :param max_iters: Maximum number of alternating U/V updates
    :param tol: Convergence threshold on the change of the projectors
    :param penalty_u: Row penalty of the left factor
    :param penalty_v: Row penalty of the right factor
    """
    max_iters: int = 200
    tol: float = 1e-6
    penalty_u: PenaltySpec = PenaltySpec()
    penalty_v: PenaltySpec = PenaltySpec()

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError(f'Invalid maximum number of iterations: {self.max_iters!r}')
        if not self.tol > 0:
            raise ValueError(f'Invalid convergence tolerance: {self.tol!r}')

    def with_lambdas(self, lam_u: float, lam_v: float) -> 'SparseSvdOptions':
        """
        Returns a copy of these options with different penalty levels.
        """
        return dataclasses.replace(self, penalty_u=self.penalty_u.with_lambda(lam_u),
                                   penalty_v=self.penalty_v.with_lambda(lam_v))


class SparseSvdResult(NamedTuple):
    """
    Result of a sparse SVD fit.
    """
    #: Re-diagonalized triplet with ordered singular values
    triplet: SvdTriplet
    #: ``Ûᵀ X̄ V̂`` before re-diagonalization
    raw_lambda_hat: np.ndarray
    #: Indices of the nonzero rows of ``U``
    support_rows: FrozenSet[int]
    #: Indices of the nonzero rows of ``V``
    support_cols: FrozenSet[int]
    iterations: int
    converged: bool
    #: Penalized objective after every accepted update
    objective_path: Tuple[float, ...] = ()

    def fitted(self) -> np.ndarray:
        """
        Returns the low-rank fit ``U diag(sigma) Vᵀ``.
        """
        return self.triplet.reconstruct()


def penalized_objective(xbar: np.ndarray, U: np.ndarray, V: np.ndarray,
                        penalty_u: Optional[PenaltySpec] = None, penalty_v: Optional[PenaltySpec] = None,
                        lambda_matrix: Optional[np.ndarray] = None) -> float:
    """
    Evaluates ``‖X̄ − U Λ Vᵀ‖² + Σ p_u(‖U_i‖) + Σ p_v(‖V_j‖)``.

    Penalties that are ``None`` are left out. Without ``lambda_matrix`` the
    scale is assumed to be absorbed into the factors.

    :param xbar: Mean matrix
    :param U: Left factor
    :param V: Right factor
    :param penalty_u: Row penalty of ``U``
    :param penalty_v: Row penalty of ``V``
    :param lambda_matrix: Optional K×K middle factor
    :return: Objective value
    :rtype: float
    """
    fit = U @ V.T if lambda_matrix is None else U @ lambda_matrix @ V.T
    value = float(np.sum((xbar - fit) ** 2))
    if penalty_u is not None:
        value += float(np.sum(penalty_value(penalty_u, np.linalg.norm(U, axis=1))))
    if penalty_v is not None:
        value += float(np.sum(penalty_value(penalty_v, np.linalg.norm(V, axis=1))))
    return value


def _orthonormalize_rows(thresholded: np.ndarray, penalty: PenaltySpec, factor: str,
                         carried: Optional[np.ndarray] = None) -> np.ndarray:
    try:
        Q, _ = qr_orthonormalize(thresholded)
    except RankDeficiencyError as e:
        if penalty.lam > 0:
            raise PenaltyTooAggressiveError(penalty.lam, factor) from e
        if carried is None:
            raise
        # Unpenalized regression on a mean of rank below K: keep the SVD basis
        return carried
    # Householder QR leaves round-off in rows that must be exact zeros
    return np.where(np.any(thresholded != 0, axis=1)[:, np.newaxis], Q, 0.0)


def _support(factor: np.ndarray) -> FrozenSet[int]:
    return frozenset(int(index) for index in np.flatnonzero(np.any(factor != 0, axis=1)))


def _finalize(xbar: np.ndarray, U: np.ndarray, V: np.ndarray, iterations: int, converged: bool,
              objective_path: Sequence[float]) -> SparseSvdResult:
    raw_lambda_hat = U.T @ xbar @ V
    P, sigma, Qt = np.linalg.svd(raw_lambda_hat)
    rows = np.any(U != 0, axis=1)[:, np.newaxis]
    cols = np.any(V != 0, axis=1)[:, np.newaxis]
    U_rotated, V_rotated = apply_sign_convention(U @ P, V @ Qt.T)
    U_final = np.where(rows, U_rotated, 0.0)
    V_final = np.where(cols, V_rotated, 0.0)
    return SparseSvdResult(
        triplet=SvdTriplet(U=U_final, sigma=sigma, V=V_final),
        raw_lambda_hat=raw_lambda_hat,
        support_rows=_support(U_final),
        support_cols=_support(V_final),
        iterations=iterations,
        converged=converged,
        objective_path=tuple(objective_path),
    )


def _check_rank(xbar: np.ndarray, K: int) -> None:
    q, p = xbar.shape
    if not 1 <= K <= min(q, p):
        raise ValueError(f'Invalid rank for a {q:d}x{p:d} matrix: {K!r}')


def sparse_svd(xbar: np.ndarray, K: int, options: Optional[SparseSvdOptions] = None) -> SparseSvdResult:
    """
    Computes a rank-``K`` SVD of the specified mean matrix whose factors
    have entire zero rows.

    Starting from the ordinary SVD, the left factor is updated by a
    row-penalized regression on ``X̄ V``, re-orthonormalized with QR, and
    the right factor likewise on ``X̄ᵀ U``. Because the current factors have
    orthonormal columns, every regression decouples into independent group
    thresholding problems per row. Updates stop when neither projector
    moves more than ``options.tol`` in Frobenius norm.

    After every full update the penalized objective is evaluated with
    ``Λ = Uᵀ X̄ V``. An update that would increase it is discarded and the
    iteration ends with the previous factors, so ``objective_path`` never
    increases. With zero penalty levels and a mean of rank below ``K`` the
    singular vectors of the zero singular values are kept.

    :param xbar: Mean matrix of shape q×p
    :type xbar: numpy.ndarray
    :param K: Rank of the decomposition
    :type K: int
    :param options: Iteration settings and penalties; no penalty by default
    :type options: SparseSvdOptions or None
    :return: Fitted sparse SVD
    :rtype: SparseSvdResult
    :raises ValueError: if ``K`` is not in ``[1, min(q, p)]``
    :raises PenaltyTooAggressiveError: if a penalty thresholds a factor below rank ``K``
    """
    xbar = as_matrix(xbar)
    _check_rank(xbar, K)
    options = options or SparseSvdOptions()
    penalty_u, penalty_v = options.penalty_u, options.penalty_v

    initial = thin_svd(xbar, K)
    U_old, V_old = initial.U, initial.V
    objective_path: List[float] = []
    objective = math.inf
    converged = False
    iterations = 0
    for iteration in range(1, options.max_iters + 1):
        U_thr = threshold_rows(penalty_u, xbar @ V_old)
        U_new = _orthonormalize_rows(U_thr, penalty_u, 'U', carried=U_old)

        V_thr = threshold_rows(penalty_v, xbar.T @ U_new)
        V_new = _orthonormalize_rows(V_thr, penalty_v, 'V', carried=V_old)

        candidate = penalized_objective(xbar, U_new, V_new, penalty_u, penalty_v,
                                        lambda_matrix=U_new.T @ xbar @ V_new)
        if candidate > objective + OBJECTIVE_SLACK * max(1.0, abs(objective)):
            logger.debug('Sparse SVD stopped after %d iterations: objective would increase from %g to %g',
                         iterations, objective, candidate)
            break
        change = max(projector_distance(U_new, U_old), projector_distance(V_new, V_old))
        U_old, V_old, objective = U_new, V_new, candidate
        objective_path.append(objective)
        iterations = iteration
        if change < options.tol:
            converged = True
            break
    else:
        logger.warning('Sparse SVD did not converge within %d iterations (K=%d, lambda_u=%g, lambda_v=%g)',
                       options.max_iters, K, penalty_u.lam, penalty_v.lam)
    return _finalize(xbar, U_old, V_old, iterations, converged, objective_path)


def _normalized(thresholded: np.ndarray, penalty: PenaltySpec, factor: str) -> np.ndarray:
    norm = np.linalg.norm(thresholded)
    if norm == 0:
        if penalty.lam > 0:
            raise PenaltyTooAggressiveError(penalty.lam, factor)
        raise RankDeficiencyError('Residual of the deflation is zero')
    return thresholded / norm


def _sparse_pair(residual: np.ndarray, options: SparseSvdOptions) -> Tuple[np.ndarray, np.ndarray, int, bool]:
    initial = thin_svd(residual, 1)
    u_old, v_old = initial.U, initial.V
    for iteration in range(1, options.max_iters + 1):
        u_new = _normalized(threshold_rows(options.penalty_u, residual @ v_old), options.penalty_u, 'U')
        v_new = _normalized(threshold_rows(options.penalty_v, residual.T @ u_new), options.penalty_v, 'V')
        change = max(projector_distance(u_new, u_old), projector_distance(v_new, v_old))
        u_old, v_old = u_new, v_new
        if change < options.tol:
            return u_old, v_old, iteration, True
    return u_old, v_old, options.max_iters, False


def sparse_svd_deflation(xbar: np.ndarray, K: int, options: Optional[SparseSvdOptions] = None) -> SparseSvdResult:
    """
    Computes a sparse SVD one singular pair at a time.

    Each pair is fitted by alternating thresholded power steps on the
    residual left after subtracting the pairs found so far. The collected
    factors are orthonormalized at the end, so the result has the same
    contract as :func:`sparse_svd`.

    :param xbar: Mean matrix of shape q×p
    :param K: Number of pairs
    :param options: Iteration settings and penalties
    :return: Fitted sparse SVD
    :rtype: SparseSvdResult
    :raises PenaltyTooAggressiveError: if a penalty thresholds a pair to zero or makes the pairs linearly dependent
    :raises RankDeficiencyError: if the mean has rank below ``K`` and no penalty is applied
    """
    xbar = as_matrix(xbar)
    _check_rank(xbar, K)
    options = options or SparseSvdOptions()
    residual = xbar.copy()
    us, vs = [], []
    iterations = 0
    converged = True
    for _ in range(K):
        u, v, pair_iterations, pair_converged = _sparse_pair(residual, options)
        sigma = float(u[:, 0] @ residual @ v[:, 0])
        residual = residual - sigma * (u @ v.T)
        us.append(u)
        vs.append(v)
        iterations += pair_iterations
        converged = converged and pair_converged
    if not converged:
        logger.warning('Deflation sparse SVD did not converge within %d iterations per pair', options.max_iters)
    U = _orthonormalize_rows(np.hstack(us), options.penalty_u, 'U')
    V = _orthonormalize_rows(np.hstack(vs), options.penalty_v, 'V')
    objective = penalized_objective(xbar, U, V, options.penalty_u, options.penalty_v,
                                    lambda_matrix=U.T @ xbar @ V)
    return _finalize(xbar, U, V, iterations, converged, [objective])


def default_lambda_grid(xbar: np.ndarray, K: int, points: int = 8) -> np.ndarray:
    """
    Returns ``points`` log-spaced penalty levels between ``1e-3·g`` and
    ``g``, where ``g`` is the largest row norm of ``X̄ V`` for the leading
    right singular vectors ``V``.

    :param xbar: Mean matrix
    :param K: Rank of the decomposition
    :param points: Number of grid points
    :return: Ascending penalty levels
    :rtype: numpy.ndarray
    """
    if points < 1:
        raise ValueError(f'Invalid number of grid points: {points!r}')
    initial = thin_svd(xbar, K)
    scale = float(np.max(np.linalg.norm(xbar @ initial.V, axis=1)))
    if scale == 0:
        return np.zeros(1)
    return np.geomspace(1e-3 * scale, scale, points)


def _training_size(n: int, split_fraction: float) -> int:
    return min(max(math.ceil(split_fraction * n), 1), n - 1)


def tune_lambda(samples, K: int, grid_u: Optional[Sequence[float]] = None,
                grid_v: Optional[Sequence[float]] = None, split_fraction: float = 0.5,
                options: Optional[SparseSvdOptions] = None, grid_points: int = 8,
                threads: int = 1) -> Tuple[PenaltySpec, PenaltySpec]:
    """
    Selects the penalty levels of the sparse SVD by sample splitting.

    The sparse SVD is fitted on the mean of the first ``⌈split_fraction·n⌉``
    samples for every pair of levels, and the pair with the smallest squared
    prediction error on the remaining samples is returned. Ties are broken
    towards the larger levels. Pairs whose fit collapses are skipped.

    :param samples: Sequence of equally shaped matrices, at least four
    :param K: Rank of the decomposition
    :type K: int
    :param grid_u: Candidate levels for ``U``; data-driven default if omitted
    :param grid_v: Candidate levels for ``V``; data-driven default if omitted
    :param split_fraction: Fraction of samples used for fitting
    :type split_fraction: float
    :param options: Iteration settings and penalty families
    :type options: SparseSvdOptions or None
    :param grid_points: Size of the default grids
    :type grid_points: int
    :param threads: Number of worker threads for the grid evaluation
    :type threads: int
    :return: Selected penalties for ``U`` and ``V``
    :rtype: tuple(PenaltySpec, PenaltySpec)
    :raises ValueError: if there are fewer than four samples, an empty grid, or an invalid split fraction
    :raises RankDeficiencyError: if every grid point collapses
    """
    stacked = as_samples(samples)
    n = stacked.shape[0]
    if n < 4:
        raise ValueError(f'Tuning requires at least 4 samples: {n:d}')
    if not 0 < split_fraction < 1:
        raise ValueError(f'Invalid split fraction: {split_fraction!r}')
    options = options or SparseSvdOptions()
    n_train = _training_size(n, split_fraction)
    train_mean = stacked[:n_train].mean(axis=0)
    validation = stacked[n_train:]
    _check_rank(train_mean, K)

    if grid_u is None or grid_v is None:
        default_grid = default_lambda_grid(train_mean, K, grid_points)
        grid_u = default_grid if grid_u is None else grid_u
        grid_v = default_grid if grid_v is None else grid_v
    grid_u = [float(lam) for lam in grid_u]
    grid_v = [float(lam) for lam in grid_v]
    if not grid_u or not grid_v:
        raise ValueError('Penalty grids must not be empty')
    pairs = list(itertools.product(grid_u, grid_v))

    def validation_loss(pair: Tuple[float, float]) -> Optional[float]:
        try:
            result = sparse_svd(train_mean, K, options.with_lambdas(*pair))
        except RankDeficiencyError as e:
            logger.debug('Skipping penalty pair %r: %s', pair, e)
            return None
        return float(np.sum((validation - result.fitted()) ** 2))

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            losses = list(executor.map(validation_loss, pairs))
    else:
        losses = [validation_loss(pair) for pair in pairs]

    scored = [(loss, -lam_u, -lam_v) for (lam_u, lam_v), loss in zip(pairs, losses) if loss is not None]
    if not scored:
        raise RankDeficiencyError(f'Every penalty pair on the tuning grid collapsed the rank-{K:d} fit')
    _, neg_u, neg_v = min(scored)
    logger.debug('Selected lambda_u=%g, lambda_v=%g from %d pairs', -neg_u, -neg_v, len(pairs))
    return options.penalty_u.with_lambda(-neg_u), options.penalty_v.with_lambda(-neg_v)
