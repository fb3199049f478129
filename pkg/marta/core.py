import abc
import functools
import importlib
import os
from pathlib import Path
from typing import Any, Callable, Dict, Generator, IO, Iterable, List, Mapping, MutableSequence, Optional, \
    Sequence, TypeVar, Union

from frozendict import frozendict


def _immutable(value: Any) -> Any:
    """
    Creates a read-only version from the specified value.

    Dictionaries, lists, and sets will be converted recursively.

    :param value: Value to be transformed into a read-only version
    :return: Read-only value
    """
    if isinstance(value, dict):
        return frozendict({k: _immutable(v) for k, v in value.items()})
    elif isinstance(value, set):
        return frozenset({_immutable(v) for v in value})
    elif isinstance(value, list):
        return tuple(_immutable(v) for v in value)
    else:
        return value


class UnsupportedFormatError(Exception):
    """
    Represents an error that is raised whenever file content with unknown or
    malformed structure is encountered.
    """
    def __init__(self, *args) -> None:
        """
        Initializes a new `UnsupportedFormatError`.
        """
        super().__init__(*args)


class DimensionMismatchError(ValueError):
    """
    Represents an error that is raised when matrices that must share a shape
    do not.
    """


class RankDeficiencyError(ArithmeticError):
    """
    Represents an error that is raised when a matrix that must have full
    column rank does not.
    """
    def __init__(self, *args) -> None:
        """
        Initializes a new `RankDeficiencyError`.
        """
        super().__init__(*args)


class PenaltyTooAggressiveError(RankDeficiencyError):
    """
    Represents an error that is raised when a penalty thresholds so many rows
    of a factor to zero that the factor cannot be orthonormalized.
    """
    def __init__(self, lam: float, factor: str) -> None:
        """
        Initializes a new `PenaltyTooAggressiveError`.

        :param lam: Penalty level that collapsed the factor
        :type lam: float
        :param factor: Name of the collapsed factor, ``'U'`` or ``'V'``
        :type factor: str
        """
        super().__init__(f'Penalty too aggressive: lambda={lam!r} thresholded factor {factor} '
                         f'below full column rank')
        self.lam = lam
        self.factor = factor


class DegenerateVarianceError(ArithmeticError):
    """
    Represents an error that is raised when a variance estimate that must be
    positive is not.
    """
    def __init__(self, *args) -> None:
        """
        Initializes a new `DegenerateVarianceError`.
        """
        super().__init__(*args)


class RankInferenceError(Exception):
    """
    Represents an error that occurred while testing a specific rank during
    sequential rank estimation.
    """
    def __init__(self, k: int, cause: BaseException) -> None:
        """
        Initializes a new `RankInferenceError`.

        :param k: Rank under test when the error occurred
        :type k: int
        :param cause: Original error
        :type cause: BaseException
        """
        super().__init__(f'Rank test failed at K={k:d}: {cause}')
        self.k = k
        self.cause = cause


class OperatorError(Exception):
    """
    Represents an error that is raised whenever an error occurs in an
    :func:`~marta.core.operator`.
    """
    def __init__(self, *args):
        """
        Initializes a new `OperatorError`.
        """
        super().__init__(*args)


Processed = TypeVar('Processed')


def operator(function: Callable[..., Processed]) -> Callable[..., Callable[..., Processed]]:
    """
    Decorator function for methods that process frame sequences.

    Usually, it will be used with operations in a
    :class:`~marta.video.SequenceProcessor` to make the methods configurable
    before applying the method to a sequence.

    Only keyword arguments are allowed for configuration.

    Example for using a decorated :attr:`subtract_background` method:

    .. code:: python

        subtract = processor.subtract_background(frames=25)
        residuals = subtract(sequence)

    :param function: Method to decorate
    :return: Configurable method
    """
    @functools.wraps(function)
    def wrapper(self, **kwargs: Any) -> Callable[..., Processed]:
        configured_operator = functools.partial(function, self, **kwargs)
        return configured_operator
    return wrapper


class Pipeline:
    """
    Represents a processing pipeline for frame sequences.

    The pipeline can be configured to hold a list of operators, all of which
    are applied to one or more sequences when calling the
    :func:`~marta.core.Pipeline.process` method.
    """
    def __init__(self) -> None:
        """
        Initializes a new pipeline without operators.
        """
        self.operators: MutableSequence[Callable] = []

    def process(self, *items: Any) -> Generator[Any, None, None]:
        """
        Applies the operators in this pipeline on the specified items.

        :param \\*items: Objects to be processed, usually frame sequences
        :return: Generator with processed items
        """
        for item in items:
            processed_item = item
            for operator in self.operators:
                processed_item = operator(processed_item)
            yield processed_item

    def add(self, operator: Callable) -> None:
        """
        Appends the specified operator to the processing chain.

        :param operator: Operator to be added
        """
        self.operators.append(operator)


class FrameProcessor(metaclass=abc.ABCMeta):
    """
    Represents an entity that can decode single matrices (frames) from binary
    data and encode them again.

    Every `FrameProcessor` needs to have an `__init__` method with an optional
    `config` parameter in order to be registered correctly.
    """
    #: File name suffixes handled by the processor
    suffixes: Sequence[str] = ()

    @abc.abstractmethod
    def __init__(self, config: Optional[Mapping[str, Any]] = None) -> None:
        """
        Initializes a new `FrameProcessor`.

        :param config: Mapping with settings.
        """
        self.config: Dict[str, Any] = {}
        if config:
            self.config.update(config)

    @property
    @abc.abstractmethod
    def format(self) -> str:
        """
        Short name of the handled format, e.g. ``'pgm'``.
        """
        raise NotImplementedError()

    @abc.abstractmethod
    def can_read(self, file: IO) -> bool:
        """
        Returns whether the data in the specified file is supported by this
        processor.

        :param file: file-like object to be tested
        :type file: IO
        :return: whether the data format of the specified file is supported or not
        :rtype: bool
        """
        raise NotImplementedError()

    @abc.abstractmethod
    def read(self, file: IO):
        """
        Returns the matrix stored in the specified file.

        :param file: file-like object to be read
        :type file: IO
        :return: Matrix with the decoded values
        :rtype: numpy.ndarray
        :raises UnsupportedFormatError: if the data is malformed or not supported
        """
        raise NotImplementedError()

    @abc.abstractmethod
    def write(self, matrix, file: IO) -> None:
        """
        Encodes the specified matrix into the specified file.

        :param matrix: Matrix to be written
        :type matrix: numpy.ndarray
        :param file: file-like object to be written
        :type file: IO
        """
        raise NotImplementedError()


def list_sources(path: Union[Path, str], suffixes: Iterable[str]) -> List[Path]:
    """
    Expands a directory or a list file into an ordered list of file paths.

    Directories are expanded to all contained files with one of the specified
    suffixes in lexicographic order of their names. Any other file is read as
    a list file with one path per line; relative paths are resolved against
    the directory of the list file and blank lines are ignored.

    :param path: Directory or list file
    :type path: pathlib.Path or str
    :param suffixes: Accepted file name suffixes for directory expansion
    :type suffixes: Iterable[str]
    :return: Ordered file paths
    :rtype: list[pathlib.Path]
    :raises FileNotFoundError: if the path does not exist
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'No such file or directory: {str(path)!r}')
    if path.is_dir():
        accepted = {suffix.lower() for suffix in suffixes}
        return sorted((entry for entry in path.iterdir()
                       if entry.is_file() and entry.suffix.lower() in accepted),
                      key=lambda entry: entry.name)
    with open(path, 'r', encoding='utf-8') as list_file:
        lines = [line.strip() for line in list_file]
    return [Path(line) if os.path.isabs(line) else path.parent / line for line in lines if line]


class Marta:
    """
    Represents an instance of the library.

    A `Marta` instance bundles a configuration with the registered frame
    processors and turns configuration values into the option records used by
    the rank tests, the scans, and the benchmark.
    """
    def __init__(self, config: Optional[Mapping[str, Any]] = None) -> None:
        """
        Initializes a new library instance with default configuration.

        The default configuration includes a list of all available
        FrameProcessor implementations.

        :param config: Mapping with settings.
        """
        self.config: Dict[str, Any] = {}
        if config:
            self.config.update(config)

        # Initialize processors in lookup order
        self.processors = [
            'marta.video.PgmProcessor',
            'marta.video.CsvProcessor',
        ]
        self._processors: List[FrameProcessor] = []
        for processor_path in list(self.processors):
            try:
                processor_class = Marta._import_from(processor_path)
            except ImportError:
                self.processors.remove(processor_path)
                continue
            processor = processor_class(self.config)
            self._processors.append(processor)

    @staticmethod
    def _import_from(member_path: str):
        """
        Returns the member located at the specified import path.

        :param member_path: Fully qualified name of the member to be imported
        :return: Member
        """
        module_path, member_name = member_path.rsplit('.', 1)
        module = importlib.import_module(module_path)
        member_class = getattr(module, member_name)
        return member_class

    @property
    def threads(self) -> int:
        """
        Number of worker threads used by parallel operations.
        """
        return max(1, int(self.config.get('threads', 1)))

    def _section(self, name: str) -> Dict[str, Any]:
        return dict(self.config.get(name, {}))

    def get_processor(self, file: IO, format: Optional[str] = None) -> Optional[FrameProcessor]:
        """
        Returns a processor that can read the data in the specified file.
        If no suitable processor can be found None will be returned.

        :param file: file-like object to be parsed.
        :type file: IO
        :param format: Short format name that restricts the lookup, e.g. ``'csv'``
        :type format: str or None
        :return: Processor object that can handle the data in the specified file,
                 or None if no suitable processor could be found.
        :rtype: FrameProcessor or None
        """
        for processor in self._processors:
            if format is not None and processor.format != format:
                continue
            file.seek(0)
            if processor.can_read(file):
                file.seek(0)
                return processor
        return None

    def read(self, file: IO, format: Optional[str] = None):
        """
        Reads the specified file and returns the matrix stored in it.

        :param file: file-like object to be parsed
        :type file: IO
        :param format: Short format name that restricts the lookup
        :type format: str or None
        :return: Decoded matrix
        :rtype: numpy.ndarray
        :raises UnsupportedFormatError: if the file format cannot be recognized or is not supported
        :raises TypeError: if the file is None
        """
        if not file:
            raise TypeError(f'Unable to read object of type {type(file)}')

        processor = self.get_processor(file, format=format)
        if not processor:
            raise UnsupportedFormatError('Unsupported frame format.' if format is None
                                         else f'Data is not readable as {format!r}.')
        return processor.read(file)

    def read_frames(self, path: Union[Path, str], format: Optional[str] = None):
        """
        Reads all frames from a directory or list file.

        :param path: Directory or list file
        :type path: pathlib.Path or str
        :param format: Short format name; the format of every file is detected if omitted
        :type format: str or None
        :return: Frame sequence
        :rtype: marta.video.FrameSequence
        """
        load_frames = Marta._import_from('marta.video.load_frames')
        return load_frames(path, format=format, manager=self)

    def svd_options(self):
        """
        Returns the sparse SVD options defined by the ``sparse_svd`` and
        ``penalty`` sections of the configuration. Penalty levels are zero;
        they are supplied or tuned later.

        :return: Options for :func:`~marta.sparse_svd.sparse_svd`
        :rtype: marta.sparse_svd.SparseSvdOptions
        """
        penalty = Marta._import_from('marta.penalty')
        sparse_svd = Marta._import_from('marta.sparse_svd')
        svd_config = self._section('sparse_svd')
        spec = penalty.PenaltySpec.from_config(self._section('penalty'))
        return sparse_svd.SparseSvdOptions(
            max_iters=int(svd_config.get('max_iters', 200)),
            tol=float(svd_config.get('tol', 1e-6)),
            penalty_u=spec,
            penalty_v=spec,
        )

    def rank_options(self, **overrides: Any):
        """
        Returns the options for rank tests as defined by the configuration.

        :param \\**overrides: Fields of :class:`~marta.rank.RankTestOptions` that replace configured values
        :return: Rank test options
        :rtype: marta.rank.RankTestOptions
        """
        rank = Marta._import_from('marta.rank')
        tuning = self._section('tuning')
        options = dict(
            svd=self.svd_options(),
            grid_points=int(tuning.get('grid_points', 8)),
            split_fraction=float(tuning.get('split_fraction', 0.5)),
            tune_every_k=bool(tuning.get('every_k', False)),
            threads=self.threads,
        )
        options.update(overrides)
        return rank.RankTestOptions(**options)

    def _rank_defaults(self):
        rank = Marta._import_from('marta.rank')
        rank_config = self._section('rank')
        return (float(rank_config.get('alpha', 0.05)),
                int(rank_config.get('k_max', 5)),
                rank.RankMethod(rank_config.get('method', 'plugin-gn')))

    def estimate_rank(self, samples, **overrides: Any):
        """
        Estimates the rank of the mean of the specified samples with the
        configured level, maximum rank, and method.

        :param samples: Sequence of equally shaped matrices
        :param \\**overrides: Fields of :class:`~marta.rank.RankTestOptions` that replace configured values
        :return: Record of the sequential tests
        :rtype: marta.rank.RankScanRecord
        """
        rank = Marta._import_from('marta.rank')
        alpha, k_max, method = self._rank_defaults()
        return rank.estimate_rank(samples, alpha=alpha, k_max=k_max, method=method,
                                  options=self.rank_options(**overrides))

    def scan(self, sequence, **overrides: Any):
        """
        Runs the sliding-window rank scan on the specified sequence with the
        configured window plan, level, maximum rank, and method.

        :param sequence: Frames to be scanned
        :type sequence: marta.video.FrameSequence
        :param \\**overrides: Fields of :class:`~marta.rank.RankTestOptions` that replace configured values
        :return: One result per window
        :rtype: list[marta.video.ScanResult]
        """
        video = Marta._import_from('marta.video')
        video_config = self._section('video')
        plan = video.WindowPlan(window=int(video_config.get('window', 10)),
                                stride=int(video_config.get('stride', 5)))
        alpha, k_max, method = self._rank_defaults()
        return video.scan(sequence, plan, alpha=alpha, k_max=k_max, method=method,
                          options=self.rank_options(**overrides), threads=self.threads)
