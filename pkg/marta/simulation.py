"""
Matrix-variate data generators and the Monte Carlo driver for empirical
sizes and powers of the rank tests.

Samples follow ``X = Π + A Z B`` with ``A Aᵀ = Σ₂`` (rows) and
``Bᵀ B = Σ₁`` (columns), so that ``Cov(vec X) = Σ₁ ⊗ Σ₂``.
"""
import concurrent.futures
import csv
import dataclasses
import logging
import math
import time
from enum import Enum
from typing import IO, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from marta.linalg import ar1_cholesky, ar1_covariance, thin_svd
from marta.penalty import PenaltyFamily, PenaltySpec
from marta.rank import RankMethod, RankTestOptions, test_rank_at
from marta.stats import kronecker_trace_sigma2


logger = logging.getLogger(__name__)

#: Rank under the null hypothesis of every benchmark cell
NULL_RANK = 1

REPORT_COLUMNS = ('model', 'n', 'q', 'p', 'c', 'method', 'reps', 'alpha', 'reject_rate', 'error_count', 'seconds')

#: Benchmark method labels
METHODS = ('gn', 'gn-mcp', 'oracle-gn', 'md-chi2', 'md-norm')


class ErrorKind(Enum):
    """
    Represents the law of the entries of ``Z``.
    """
    NORMAL = 'normal'
    STUDENT_T = 'student-t'
    GAMMA = 'gamma'


@dataclasses.dataclass(frozen=True)
class ErrorDistribution:
    """
    Distribution of the i.i.d. entries of ``Z``.

    Normal and gamma entries are standardized to mean zero and unit
    variance, as are Student t entries with more than two degrees of
    freedom. Student t entries with at most two degrees of freedom have no
    finite variance and are drawn unstandardized.
    """
    kind: ErrorKind = ErrorKind.NORMAL
    df: Optional[float] = None
    shape: Optional[float] = None
    scale: Optional[float] = None

    def __post_init__(self) -> None:
        kind = ErrorKind(self.kind)
        object.__setattr__(self, 'kind', kind)
        if kind is ErrorKind.STUDENT_T and not (self.df is not None and self.df > 0):
            raise ValueError(f'Student t errors require positive degrees of freedom: {self.df!r}')
        if kind is ErrorKind.GAMMA and not (self.shape is not None and self.shape > 0
                                            and self.scale is not None and self.scale > 0):
            raise ValueError(f'Gamma errors require positive shape and scale: {self.shape!r}, {self.scale!r}')

    @classmethod
    def normal(cls) -> 'ErrorDistribution':
        return cls(ErrorKind.NORMAL)

    @classmethod
    def student_t(cls, df: float) -> 'ErrorDistribution':
        return cls(ErrorKind.STUDENT_T, df=df)

    @classmethod
    def gamma(cls, shape: float, scale: float) -> 'ErrorDistribution':
        return cls(ErrorKind.GAMMA, shape=shape, scale=scale)

    @property
    def standardized(self) -> bool:
        return self.kind is not ErrorKind.STUDENT_T or self.df > 2

    def draw(self, rng: np.random.Generator, size: Union[int, Tuple[int, ...]]) -> np.ndarray:
        """
        Draws entries with the specified shape.
        """
        if self.kind is ErrorKind.NORMAL:
            return rng.standard_normal(size)
        if self.kind is ErrorKind.STUDENT_T:
            values = rng.standard_t(self.df, size)
            return values * math.sqrt((self.df - 2) / self.df) if self.standardized else values
        values = rng.gamma(self.shape, self.scale, size)
        return (values - self.shape * self.scale) / (math.sqrt(self.shape) * self.scale)

    def __str__(self) -> str:
        if self.kind is ErrorKind.STUDENT_T:
            return f't({self.df:g})'
        if self.kind is ErrorKind.GAMMA:
            return f'gamma({self.shape:g},{self.scale:g})'
        return 'normal'


@dataclasses.dataclass(frozen=True, eq=False)
class SimModel:
    """
    Matrix-variate model with mean ``mean`` and AR(1) row and column
    correlations.

    :param name: Model name, e.g. ``'a'``
    :param n: Sample size
    :param q: Number of rows
    :param p: Number of columns
    :param c: Signal parameter of the second component
    :param rho1: Lag-one correlation of the column covariance ``Σ₁``
    :param rho2: Lag-one correlation of the row covariance ``Σ₂``
    :param error: Law of the entries of ``Z``
    :param mean: Mean matrix of shape q×p
    """
    name: str
    n: int
    q: int
    p: int
    c: float
    rho1: float
    rho2: float
    error: ErrorDistribution
    mean: np.ndarray

    def __post_init__(self) -> None:
        if self.n < 1 or self.q < 1 or self.p < 1:
            raise ValueError(f'Invalid model dimensions: n={self.n!r}, q={self.q!r}, p={self.p!r}')
        mean = np.array(self.mean, dtype=float)
        if mean.shape != (self.q, self.p):
            raise ValueError(f'Mean has shape {mean.shape}, expected {(self.q, self.p)}')
        mean.flags.writeable = False
        object.__setattr__(self, 'mean', mean)
        # Validates |rho| < 1
        ar1_covariance(1, self.rho1)
        ar1_covariance(1, self.rho2)

    @property
    def A(self) -> np.ndarray:
        """
        Lower Cholesky factor of the row covariance ``Σ₂``.
        """
        return ar1_cholesky(self.q, self.rho2)

    @property
    def B(self) -> np.ndarray:
        """
        Upper Cholesky factor of the column covariance ``Σ₁``.
        """
        return ar1_cholesky(self.p, self.rho1).T

    @property
    def sigma1(self) -> np.ndarray:
        return ar1_covariance(self.p, self.rho1)

    @property
    def sigma2(self) -> np.ndarray:
        return ar1_covariance(self.q, self.rho2)

    @property
    def trace_sigma2(self) -> Optional[float]:
        """
        Exact ``tr(Σ²)`` of the vectorized samples, or ``None`` when the
        errors have no finite variance.
        """
        if not self.error.standardized:
            return None
        return kronecker_trace_sigma2(self.sigma1, self.sigma2)

    def oracle_factors(self, K: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns the leading ``K`` singular vectors of the mean.
        """
        triplet = thin_svd(self.mean, K)
        return triplet.U, triplet.V


def model_a(n: int, q: int, p: int, c: float) -> SimModel:
    """
    Mean of ones on the top-left ``q/10 × p/10`` block and ``c`` on the
    diagonally adjacent block, AR(1) correlation 0.25, normal errors.
    """
    mean = np.zeros((q, p))
    mean[:q // 10, :p // 10] = 1.0
    mean[q // 10:q // 5, p // 10:p // 5] = c
    return SimModel('a', n, q, p, c, 0.25, 0.25, ErrorDistribution.normal(), mean)


def model_b(n: int, q: int, p: int, c: float) -> SimModel:
    """
    Mean with ``Π₁₁ = 10`` and ``Π₂₂ = c``, AR(1) correlation 0.75,
    normal errors.
    """
    mean = np.zeros((q, p))
    mean[0, 0] = 10.0
    mean[1, 1] = c
    return SimModel('b', n, q, p, c, 0.75, 0.75, ErrorDistribution.normal(), mean)


def model_c(n: int, q: int, p: int, c: float) -> SimModel:
    """
    Same as :func:`model_b` with unstandardized t(2) errors.
    """
    return dataclasses.replace(model_b(n, q, p, c), name='c', error=ErrorDistribution.student_t(2))


def custom_model(mean: np.ndarray, n: int, rho1: float = 0.0, rho2: float = 0.0,
                 error: Optional[ErrorDistribution] = None, c: float = 0.0) -> SimModel:
    """
    Creates a model with an arbitrary mean.
    """
    mean = np.asarray(mean, dtype=float)
    q, p = mean.shape
    return SimModel('custom', n, q, p, c, rho1, rho2, error or ErrorDistribution.normal(), mean)


MODELS = {
    'a': model_a,
    'b': model_b,
    'c': model_c,
}


def replication_seed(base_seed: int, cell_index: int, replication: int) -> np.random.SeedSequence:
    """
    Returns the seed of a single replication. Distinct arguments give
    independent streams.
    """
    return np.random.SeedSequence([base_seed, cell_index, replication])


def make_rng(seed: Union[int, np.random.SeedSequence]) -> np.random.Generator:
    """
    Returns a Philox generator for the specified seed.
    """
    return np.random.Generator(np.random.Philox(seed))


def draw_sample(model: SimModel, rng_seed: Union[int, np.random.SeedSequence, np.random.Generator]) -> np.ndarray:
    """
    Draws ``n`` independent samples ``Π + A Z_i B`` from the model.

    :param model: Model
    :type model: SimModel
    :param rng_seed: Seed or generator
    :return: Samples of shape ``(n, q, p)``
    :rtype: numpy.ndarray
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    Z = model.error.draw(rng, (model.n, model.q, model.p))
    return model.mean + model.A @ Z @ model.B


@dataclasses.dataclass(frozen=True, eq=False)
class BenchCell:
    """
    Combination of a model and a method label from :data:`METHODS`.
    """
    model: SimModel
    method: str

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f'Unknown benchmark method: {self.method!r}')


class CellResult(NamedTuple):
    """
    Rejection frequency of a single benchmark cell.
    """
    cell: BenchCell
    reps: int
    alpha: float
    rejections: int
    error_count: int
    #: Test statistics of the successful replications in replication order
    statistics: Tuple[float, ...]
    #: Summed duration of the replications, if measured
    seconds: Optional[float] = None

    @property
    def reject_rate(self) -> float:
        """
        Rejection frequency among replications without error, NaN if every
        replication failed.
        """
        successful = self.reps - self.error_count
        return self.rejections / successful if successful else math.nan


class BenchReport(NamedTuple):
    """
    Results of a Monte Carlo run.
    """
    results: Tuple[CellResult, ...]
    reps: int
    alpha: float
    base_seed: int


def method_options(cell: BenchCell, base: Optional[RankTestOptions] = None) -> Tuple[RankMethod, RankTestOptions]:
    """
    Translates a benchmark method label into a rank test and its options.
    """
    options = base or RankTestOptions()
    model = cell.model
    if cell.method in ('gn', 'gn-mcp'):
        family = PenaltyFamily.MCP if cell.method == 'gn-mcp' else PenaltyFamily.SCAD
        svd = dataclasses.replace(options.svd, penalty_u=PenaltySpec(family), penalty_v=PenaltySpec(family))
        return RankMethod.PLUGIN_GN, dataclasses.replace(options, svd=svd)
    if cell.method == 'oracle-gn':
        U, V = model.oracle_factors(NULL_RANK)
        return RankMethod.ORACLE_GN, dataclasses.replace(options, oracle_u=U, oracle_v=V,
                                                         trace_sigma2=model.trace_sigma2)
    if cell.method == 'md-chi2':
        return RankMethod.MIN_DISCREPANCY_CHI2, options
    return RankMethod.MIN_DISCREPANCY_NORMALIZED, options


def run_monte_carlo(cells: Sequence[BenchCell], reps: int, alpha: float = 0.05, base_seed: int = 0,
                    threads: int = 1, options: Optional[RankTestOptions] = None,
                    timing: bool = False) -> BenchReport:
    """
    Estimates the rejection frequency of the rank-one null hypothesis for
    every cell.

    Replication ``r`` of cell ``i`` draws its samples from
    :func:`replication_seed` ``(base_seed, i, r)``, so reports do not
    depend on the number of threads. Replications that fail for numerical
    reasons are counted separately and excluded from the frequency.

    :param cells: Benchmark cells
    :param reps: Number of replications per cell
    :type reps: int
    :param alpha: Significance level
    :type alpha: float
    :param base_seed: Seed of the whole run
    :type base_seed: int
    :param threads: Number of worker threads
    :type threads: int
    :param options: Base options for the rank tests
    :type options: RankTestOptions or None
    :param timing: Whether to measure the duration of every cell
    :type timing: bool
    :return: Report with one result per cell
    :rtype: BenchReport
    :raises ValueError: if ``reps < 1``
    """
    if reps < 1:
        raise ValueError(f'Invalid number of replications: {reps!r}')
    configured = [method_options(cell, options) for cell in cells]
    tasks = [(index, replication) for index in range(len(cells)) for replication in range(reps)]

    def replicate(task: Tuple[int, int]) -> Tuple[Optional[bool], Optional[float], float]:
        index, replication = task
        method, cell_options = configured[index]
        start = time.perf_counter()
        samples = draw_sample(cells[index].model, replication_seed(base_seed, index, replication))
        try:
            outcome = test_rank_at(samples, NULL_RANK, alpha, method, cell_options)
        except ArithmeticError as e:
            logger.warning('Replication %d of cell %d (%s, %s) failed: %s', replication, index,
                           cells[index].model.name, cells[index].method, e)
            return None, None, time.perf_counter() - start
        return outcome.reject, outcome.statistic, time.perf_counter() - start

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(replicate, tasks))
    else:
        outcomes = [replicate(task) for task in tasks]

    results: List[CellResult] = []
    for index, cell in enumerate(cells):
        cell_outcomes = outcomes[index * reps:(index + 1) * reps]
        successful = [(reject, statistic) for reject, statistic, _ in cell_outcomes if reject is not None]
        results.append(CellResult(
            cell=cell,
            reps=reps,
            alpha=alpha,
            rejections=sum(1 for reject, _ in successful if reject),
            error_count=reps - len(successful),
            statistics=tuple(statistic for _, statistic in successful),
            seconds=sum(seconds for _, _, seconds in cell_outcomes) if timing else None,
        ))
        logger.info('Cell %s n=%d q=%d p=%d c=%g %s: reject rate %.4f', cell.model.name, cell.model.n,
                    cell.model.q, cell.model.p, cell.model.c, cell.method, results[-1].reject_rate)
    return BenchReport(results=tuple(results), reps=reps, alpha=alpha, base_seed=base_seed)


_TABLE_DIMENSIONS = {
    'a': ((50, 50, 50), (50, 50, 100), (50, 50, 200), (50, 100, 100), (50, 100, 200), (50, 200, 200),
          (100, 50, 50), (100, 50, 100), (100, 50, 200), (100, 100, 100), (100, 100, 200)),
    'b': ((50, 50, 50), (50, 50, 100), (50, 50, 200), (50, 100, 100), (50, 100, 200),
          (100, 50, 50), (100, 50, 100), (100, 50, 200), (100, 100, 100), (100, 100, 200)),
}
_TABLE_DIMENSIONS['c'] = _TABLE_DIMENSIONS['b']


def published_cells(model: str) -> Iterator[BenchCell]:
    """
    Yields the benchmark cells of the published size and power tables.

    For model ``'a'`` both the plug-in test and the chi-square minimum
    discrepancy test are run for ``c`` in 0, 0.1, …, 0.4. For models
    ``'b'`` and ``'c'`` both tests are run at ``c = 0`` and the plug-in test
    alone for ``c`` in 1, …, 4.

    :param model: Model name, one of ``'a'``, ``'b'``, ``'c'``
    :raises ValueError: if the model is unknown
    """
    if model not in MODELS:
        raise ValueError(f'Unknown model: {model!r}')
    factory = MODELS[model]
    for n, q, p in _TABLE_DIMENSIONS[model]:
        if model == 'a':
            for c in (0.0, 0.1, 0.2, 0.3, 0.4):
                yield BenchCell(factory(n, q, p, c), 'gn')
                yield BenchCell(factory(n, q, p, c), 'md-chi2')
        else:
            yield BenchCell(factory(n, q, p, 0.0), 'gn')
            yield BenchCell(factory(n, q, p, 0.0), 'md-chi2')
            for c in (1.0, 2.0, 3.0, 4.0):
                yield BenchCell(factory(n, q, p, c), 'gn')


def report_rows(report: BenchReport, timing: bool = False) -> Iterable[Tuple[str, ...]]:
    """
    Yields the CSV rows of a report without header. The ``seconds`` column
    is empty unless ``timing`` is set.
    """
    for result in report.results:
        model = result.cell.model
        seconds = '' if not timing or result.seconds is None else f'{result.seconds:.3f}'
        yield (model.name, str(model.n), str(model.q), str(model.p), f'{model.c:g}', result.cell.method,
               str(result.reps), f'{result.alpha:g}', f'{result.reject_rate:.4f}', str(result.error_count),
               seconds)


def write_report_csv(report: BenchReport, file: IO, timing: bool = False) -> None:
    """
    Writes a report as CSV with the columns of :data:`REPORT_COLUMNS`.
    """
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(report_rows(report, timing=timing))


def lag1_autocorrelation(values: Sequence[float]) -> float:
    """
    Returns the lag-one sample autocorrelation of a sequence.

    :raises ValueError: if there are fewer than three values
    """
    x = np.asarray(values, dtype=float)
    if x.size < 3:
        raise ValueError(f'Autocorrelation requires at least 3 values: {x.size:d}')
    return float(np.corrcoef(x[:-1], x[1:])[0, 1])
