"""
Dense matrix kernels shared by all statistics: thin SVD, QR
orthonormalization, Gram tables of samples, and AR(1) covariance factors.
"""
import logging
from pathlib import Path
from typing import IO, Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from marta.core import DimensionMismatchError, RankDeficiencyError, UnsupportedFormatError, list_sources


logger = logging.getLogger(__name__)

#: Relative tolerance of SVD reconstructions
RECONSTRUCTION_TOL = 1e-8
#: Tolerance of orthonormality checks on QR factors
ORTHOGONALITY_TOL = 1e-10
#: Pivots of R below this multiple of the Frobenius norm count as zero
RANK_TOL = 1e-12

MatrixLike = Union[np.ndarray, Sequence[Sequence[float]]]


def as_matrix(data: MatrixLike) -> np.ndarray:
    """
    Converts the specified data to a two-dimensional float matrix.

    :param data: Nested sequence or array
    :return: Matrix with finite entries
    :rtype: numpy.ndarray
    :raises ValueError: if the data is not two-dimensional or contains NaN or infinite values
    """
    matrix = np.asarray(data, dtype=float)
    if matrix.ndim != 2:
        raise ValueError(f'Expected a two-dimensional matrix, got {matrix.ndim:d} dimension(s)')
    if not np.all(np.isfinite(matrix)):
        raise ValueError('Matrix contains non-finite entries')
    return matrix


def as_samples(samples: Union[np.ndarray, Iterable[MatrixLike]]) -> np.ndarray:
    """
    Stacks the specified samples into an array of shape ``(n, q, p)``.

    :param samples: Sequence of equally shaped matrices
    :return: Stacked samples
    :rtype: numpy.ndarray
    :raises ValueError: if there are no samples or a sample is not finite
    :raises DimensionMismatchError: if the samples do not share one shape
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 3:
        stacked = samples.astype(float, copy=False)
        if not np.all(np.isfinite(stacked)):
            raise ValueError('Samples contain non-finite entries')
        if stacked.shape[0] == 0:
            raise ValueError('At least one sample is required')
        return stacked
    matrices = [as_matrix(sample) for sample in samples]
    if not matrices:
        raise ValueError('At least one sample is required')
    shape = matrices[0].shape
    for index, matrix in enumerate(matrices):
        if matrix.shape != shape:
            raise DimensionMismatchError(f'Sample {index:d} has shape {matrix.shape}, expected {shape}')
    return np.stack(matrices)


class SvdTriplet(NamedTuple):
    """
    Leading singular triplet ``(U, sigma, V)`` of a matrix.

    ``U`` and ``V`` have orthonormal columns and ``sigma`` is sorted in
    descending order. In every column of ``U`` the entry with the largest
    magnitude is nonnegative.
    """
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def K(self) -> int:
        """
        Number of singular triplets.
        """
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        """
        Returns the matrix ``U diag(sigma) Vᵀ``.
        """
        return (self.U * self.sigma) @ self.V.T

    @classmethod
    def empty(cls, q: int, p: int) -> 'SvdTriplet':
        """
        Returns the triplet with zero columns for a q×p matrix.
        """
        return cls(np.zeros((q, 0)), np.zeros(0), np.zeros((p, 0)))


class GramTable(NamedTuple):
    """
    Table of all pairwise inner products ``G[i, j] = tr(X_i X_jᵀ)`` of a
    sample set.
    """
    G: np.ndarray

    @property
    def n(self) -> int:
        """
        Number of samples the table was built from.
        """
        return self.G.shape[0]


def apply_sign_convention(U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if U.shape[1] == 0:
        return U, V
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivots, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def thin_svd(M: MatrixLike, K: int) -> SvdTriplet:
    """
    Returns the leading ``K`` singular triplets of the specified matrix.

    Works for any shape; no ``q ≥ p`` orientation is required.

    :param M: Matrix to be decomposed
    :param K: Number of singular triplets
    :type K: int
    :return: Leading triplet with the deterministic sign convention applied
    :rtype: SvdTriplet
    :raises ValueError: if ``K`` is not in ``[1, min(q, p)]`` or the matrix is not finite
    """
    matrix = as_matrix(M)
    q, p = matrix.shape
    if not 1 <= K <= min(q, p):
        raise ValueError(f'Invalid number of singular triplets for a {q:d}x{p:d} matrix: {K!r}')
    U, sigma, Vt = np.linalg.svd(matrix, full_matrices=False)
    U, V = apply_sign_convention(U[:, :K], Vt[:K].T)
    return SvdTriplet(U=U, sigma=sigma[:K].copy(), V=V)


def singular_values(M: MatrixLike) -> np.ndarray:
    """
    Returns all singular values of the specified matrix in descending order.
    """
    return np.linalg.svd(as_matrix(M), compute_uv=False)


def qr_orthonormalize(M: MatrixLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthonormalizes the columns of the specified matrix.

    The signs are chosen such that the triangular factor has a nonnegative
    diagonal, which makes the factorization unique.

    :param M: Matrix of shape q×K with ``K ≤ q`` and full column rank
    :return: Column-orthonormal ``Q`` and upper-triangular ``R`` with ``QR = M``
    :rtype: tuple(numpy.ndarray, numpy.ndarray)
    :raises RankDeficiencyError: if the matrix does not have full column rank
    """
    matrix = as_matrix(M)
    q, k = matrix.shape
    if k > q:
        raise RankDeficiencyError(f'Cannot orthonormalize {k:d} columns in dimension {q:d}')
    norm = np.linalg.norm(matrix)
    if k > 0 and norm == 0:
        raise RankDeficiencyError('Cannot orthonormalize a zero matrix')
    Q, R = np.linalg.qr(matrix)
    diagonal = np.diag(R)
    if k > 0 and np.min(np.abs(diagonal)) < RANK_TOL * norm:
        raise RankDeficiencyError(f'Matrix is rank-deficient: smallest pivot {np.min(np.abs(diagonal)):.3g}')
    signs = np.where(diagonal < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, np.newaxis]


def gram_table(samples: Union[np.ndarray, Iterable[MatrixLike]]) -> GramTable:
    """
    Computes the Gram table of the specified samples.

    :param samples: Sequence of equally shaped matrices
    :return: Symmetric table of pairwise traces
    :rtype: GramTable
    :raises DimensionMismatchError: if the samples do not share one shape
    """
    stacked = as_samples(samples)
    flat = stacked.reshape(stacked.shape[0], -1)
    G = flat @ flat.T
    return GramTable(G=0.5 * (G + G.T))


def ar1_covariance(dim: int, rho: float) -> np.ndarray:
    """
    Returns the AR(1) correlation matrix with entries ``rho**|i - j|``.

    :raises ValueError: if ``dim < 1`` or ``|rho| ≥ 1``
    """
    if dim < 1:
        raise ValueError(f'Invalid dimension: {dim!r}')
    if not abs(rho) < 1:
        raise ValueError(f'AR(1) correlation must satisfy |rho| < 1: {rho!r}')
    return scipy.linalg.toeplitz(rho ** np.arange(dim, dtype=float))


def ar1_cholesky(dim: int, rho: float) -> np.ndarray:
    """
    Returns the lower Cholesky factor ``L`` of the AR(1) correlation matrix,
    so that ``L Lᵀ`` has entries ``rho**|i - j|``.

    :param dim: Matrix dimension
    :type dim: int
    :param rho: Lag-one correlation
    :type rho: float
    :return: Lower-triangular factor
    :rtype: numpy.ndarray
    :raises ValueError: if ``dim < 1`` or ``|rho| ≥ 1``
    """
    return np.linalg.cholesky(ar1_covariance(dim, rho))


def projector_distance(U1: np.ndarray, U2: np.ndarray) -> float:
    """
    Returns the Frobenius distance ``‖U1 U1ᵀ − U2 U2ᵀ‖`` of the projectors
    onto the column spaces of two orthonormal factors.
    """
    return float(np.linalg.norm(U1 @ U1.T - U2 @ U2.T))


def read_matrix_csv(file: Union[Path, str, IO]) -> np.ndarray:
    """
    Reads a matrix from comma-separated rows without header.

    :param file: Path or text file-like object
    :return: Matrix
    :rtype: numpy.ndarray
    :raises UnsupportedFormatError: if the content is not a finite numeric matrix
    """
    try:
        matrix = np.loadtxt(file, delimiter=',', ndmin=2, dtype=float)
    except ValueError as e:
        raise UnsupportedFormatError(f'Malformed matrix CSV: {e}') from e
    if matrix.size == 0:
        raise UnsupportedFormatError('Matrix CSV is empty')
    if not np.all(np.isfinite(matrix)):
        raise UnsupportedFormatError('Matrix CSV contains non-finite entries')
    return matrix


def write_matrix_csv(matrix: MatrixLike, file: Union[Path, str, IO]) -> None:
    """
    Writes a matrix as comma-separated rows without header. Values are
    written with enough digits to be read back exactly.
    """
    np.savetxt(file, np.atleast_2d(np.asarray(matrix, dtype=float)), delimiter=',', fmt='%.17g')


def read_samples(path: Union[Path, str]) -> np.ndarray:
    """
    Reads all CSV matrices from a directory or a list file.

    :param path: Directory with ``.csv`` files or a list file
    :return: Stacked samples of shape ``(n, q, p)``
    :rtype: numpy.ndarray
    :raises UnsupportedFormatError: if no sample can be found or a file is malformed
    :raises DimensionMismatchError: if the samples do not share one shape
    """
    sources: List[Path] = list_sources(path, ('.csv',))
    if not sources:
        raise UnsupportedFormatError(f'No CSV samples found in {str(path)!r}')
    logger.debug('Reading %d samples from %s', len(sources), path)
    return as_samples(read_matrix_csv(source) for source in sources)
