"""
Grayscale frame sequences and the sliding-window rank scan.

Every window of consecutive frames is treated as one sample set, and the
estimated rank of its mean counts the objects that differ from the
background.
"""
import concurrent.futures
import csv
import dataclasses
import io
import logging
from pathlib import Path
from typing import Any, Dict, IO, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import PIL.Image
from frozendict import frozendict

from marta.core import DimensionMismatchError, FrameProcessor, Marta, OperatorError, RankInferenceError, \
    UnsupportedFormatError, _immutable, list_sources, operator
from marta.linalg import as_matrix, as_samples, read_matrix_csv, write_matrix_csv
from marta.rank import RankMethod, RankScanRecord, RankTestOptions, estimate_rank
from marta.simulation import make_rng


logger = logging.getLogger(__name__)

#: Largest gray value of supported 8-bit frames
MAX_GRAY = 255


class FrameSequence:
    """
    Represents an ordered sequence of equally shaped grayscale frames.

    A `FrameSequence` is an immutable value object. Its frames are stored as
    one read-only array of shape ``(T, q, p)``; metadata such as the source
    files is accessible as attributes.
    """
    def __init__(self, frames: Union[np.ndarray, Iterable[np.ndarray]], **metadata: Any) -> None:
        """
        Initializes a new `FrameSequence`.

        :param frames: Frames in temporal order
        :param \\**metadata: Metadata describing the frames
        :raises ValueError: if there are no frames or a frame is not finite
        :raises DimensionMismatchError: if the frames do not share one shape
        """
        stacked = np.array(as_samples(frames), dtype=float)
        stacked.flags.writeable = False
        self._frames = stacked
        if 'sources' not in metadata:
            metadata['sources'] = ()
        self.metadata = _immutable(metadata)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return np.array_equal(self._frames, other._frames) and self.metadata == other.metadata

    def __getattr__(self, item: str) -> Any:
        if item in self.__dict__.get('metadata', {}):
            return self.metadata[item]
        raise AttributeError(f'{self.__class__!r} object has no attribute {item!r}')

    def __setattr__(self, key: str, value: Any):
        if 'metadata' in self.__dict__ and key in self.__dict__['metadata']:
            raise NotImplementedError('Unable to overwrite metadata attribute.')
        super().__setattr__(key, value)

    def __setstate__(self, state: Dict[str, Any]):
        self.__dict__ = state

    def __hash__(self) -> int:
        return hash(self._frames.tobytes()) ^ hash(self.shape) ^ hash(self.metadata)

    def __len__(self) -> int:
        return self._frames.shape[0]

    def __getitem__(self, index):
        return self._frames[index]

    def __repr__(self) -> str:
        metadata_str = ' '.join(
            f'{k}={v!r}'
            for k, v in self.metadata.items()
            if not isinstance(v, (frozendict, tuple))
        )
        return f'<{self.__class__.__qualname__} frames={len(self)} shape={self.shape} {metadata_str}>'.rstrip()

    @property
    def frames(self) -> np.ndarray:
        """
        Read-only array of shape ``(T, q, p)``.
        """
        return self._frames

    @property
    def shape(self) -> Tuple[int, int]:
        return self._frames.shape[1], self._frames.shape[2]

    def replace(self, frames: np.ndarray, **metadata: Any) -> 'FrameSequence':
        """
        Returns a sequence with other frames and updated metadata.
        """
        merged = {k: v for k, v in self.metadata.items()}
        merged.update(metadata)
        return FrameSequence(frames, **merged)


def _check_unit_range(matrix: np.ndarray, what: str) -> None:
    if matrix.size and (np.min(matrix) < 0 or np.max(matrix) > 1):
        raise UnsupportedFormatError(f'{what} values must lie in [0, 1]')


def _quantize(matrix: np.ndarray) -> np.ndarray:
    matrix = as_matrix(matrix)
    if np.min(matrix) < 0 or np.max(matrix) > 1:
        raise ValueError('Frame values must lie in [0, 1] to be written as 8-bit gray')
    return np.rint(matrix * MAX_GRAY).astype(np.uint8)


class PgmProcessor(FrameProcessor):
    """
    Represents a processor for 8-bit grayscale PGM frames in plain (P2) and
    raw (P5) encoding.

    Gray values are divided by 255. Frames are written as P2 unless the
    ``'pgm'`` configuration section sets ``plain`` to false.
    """
    suffixes = ('.pgm',)

    def __init__(self, config: Optional[Mapping[str, Any]] = None) -> None:
        """
        Initializes a new `PgmProcessor`.

        :param config: Mapping with settings.
        """
        super().__init__(config)

    @property
    def format(self) -> str:
        return 'pgm'

    @staticmethod
    def _header(data: bytes) -> Tuple[bytes, int, int, int]:
        tokens: List[bytes] = []
        position = 0
        while len(tokens) < 4:
            while position < len(data) and data[position:position + 1].isspace():
                position += 1
            if position >= len(data):
                raise UnsupportedFormatError('Truncated PGM header')
            if data[position:position + 1] == b'#':
                end = data.find(b'\n', position)
                position = len(data) if end < 0 else end + 1
                continue
            start = position
            while position < len(data) and not data[position:position + 1].isspace() \
                    and data[position:position + 1] != b'#':
                position += 1
            tokens.append(data[start:position])
        magic, width, height, max_value = tokens
        if magic not in (b'P2', b'P5'):
            raise UnsupportedFormatError(f'Unsupported PGM magic number: {magic!r}')
        try:
            width, height, max_value = int(width), int(height), int(max_value)
        except ValueError as e:
            raise UnsupportedFormatError(f'Malformed PGM header: {e}') from e
        if width < 1 or height < 1:
            raise UnsupportedFormatError(f'Invalid PGM dimensions: {width}x{height}')
        if max_value != MAX_GRAY:
            raise UnsupportedFormatError(f'Unsupported PGM maximum gray value: {max_value}')
        return magic, width, height, max_value

    def can_read(self, file: IO) -> bool:
        return file.read(2) in (b'P2', b'P5')

    def read(self, file: IO) -> np.ndarray:
        data = file.read()
        _, width, height, max_value = PgmProcessor._header(data)
        try:
            with PIL.Image.open(io.BytesIO(data)) as image:
                image.load()
                if image.size != (width, height):
                    raise UnsupportedFormatError(f'PGM data does not match header size {width}x{height}')
                pixels = np.asarray(image.convert('L'), dtype=float)
        except (OSError, ValueError, SyntaxError) as e:
            raise UnsupportedFormatError(f'Malformed PGM data: {e}') from e
        return pixels / max_value

    def write(self, matrix: np.ndarray, file: IO) -> None:
        gray = _quantize(matrix)
        pgm_config = self.config.get('pgm', {})
        if pgm_config.get('plain', True):
            height, width = gray.shape
            lines = [f'P2\n{width} {height}\n{MAX_GRAY}\n']
            lines.extend(' '.join(str(value) for value in row) + '\n' for row in gray)
            file.write(''.join(lines).encode('ascii'))
        else:
            PIL.Image.fromarray(gray).save(file, 'PPM')


class CsvProcessor(FrameProcessor):
    """
    Represents a processor for frames stored as comma-separated rows of
    values in ``[0, 1]``.
    """
    suffixes = ('.csv',)

    def __init__(self, config: Optional[Mapping[str, Any]] = None) -> None:
        """
        Initializes a new `CsvProcessor`.

        :param config: Mapping with settings.
        """
        super().__init__(config)

    @property
    def format(self) -> str:
        return 'csv'

    def can_read(self, file: IO) -> bool:
        try:
            first_line = file.readline().decode('utf-8').strip()
        except UnicodeDecodeError:
            return False
        if not first_line:
            return False
        try:
            [float(value) for value in first_line.split(',')]
        except ValueError:
            return False
        return True

    def read(self, file: IO) -> np.ndarray:
        try:
            text = file.read().decode('utf-8')
        except UnicodeDecodeError as e:
            raise UnsupportedFormatError(f'Frame CSV is not UTF-8 text: {e}') from e
        matrix = read_matrix_csv(io.StringIO(text))
        _check_unit_range(matrix, 'Frame CSV')
        return matrix

    def write(self, matrix: np.ndarray, file: IO) -> None:
        matrix = as_matrix(matrix)
        _check_unit_range(matrix, 'Frame')
        text = io.StringIO()
        write_matrix_csv(matrix, text)
        file.write(text.getvalue().encode('utf-8'))


def load_frames(path: Union[Path, str], format: Optional[str] = None,
                manager: Optional[Marta] = None) -> FrameSequence:
    """
    Reads all frames from a directory, ordered by file name, or from a list
    file with one frame path per line.

    :param path: Directory or list file
    :type path: pathlib.Path or str
    :param format: ``'pgm'`` or ``'csv'``; detected per file if omitted
    :type format: str or None
    :param manager: Library instance whose processors decode the files
    :type manager: Marta or None
    :return: Frames with the source paths as metadata
    :rtype: FrameSequence
    :raises UnsupportedFormatError: if there are no frames, a file is malformed or
        autodetection finds files of more than one format
    :raises DimensionMismatchError: if the frames do not share one shape
    """
    manager = manager or Marta()
    suffixes = [suffix for processor in manager._processors
                if format is None or processor.format == format
                for suffix in processor.suffixes]
    sources = list_sources(path, suffixes)
    if not sources:
        raise UnsupportedFormatError(f'No frames found in {str(path)!r}')
    if format is None:
        formats = sorted({processor.format for source in sources for processor in manager._processors
                          if source.suffix.lower() in processor.suffixes})
        if len(formats) > 1:
            raise UnsupportedFormatError(f'Mixed frame formats {", ".join(formats)} in {str(path)!r}; '
                                         f'select one with a format')
    frames = []
    for source in sources:
        with open(source, 'rb') as file:
            frames.append(manager.read(file, format=format))
        if frames[-1].shape != frames[0].shape:
            raise DimensionMismatchError(f'Frame {str(source)!r} has shape {frames[-1].shape}, '
                                         f'expected {frames[0].shape}')
    logger.info('Loaded %d frames of shape %dx%d from %s', len(frames), *frames[0].shape, path)
    return FrameSequence(np.stack(frames), sources=tuple(str(source) for source in sources))


def subtract_background(sequence: FrameSequence, frames: Optional[int] = None,
                        reference: Optional[np.ndarray] = None) -> FrameSequence:
    """
    Subtracts a reference frame from every frame.

    The reference is either supplied or the pixelwise median of the first
    ``frames`` frames (25 by default).

    :param sequence: Frames in ``[0, 1]``
    :type sequence: FrameSequence
    :param frames: Number of leading frames for the median reference
    :type frames: int or None
    :param reference: Explicit reference frame
    :type reference: numpy.ndarray or None
    :return: Residual frames
    :rtype: FrameSequence
    :raises OperatorError: if the median window is empty or longer than the sequence
    :raises DimensionMismatchError: if the reference does not match the frame shape
    """
    if reference is not None:
        reference = as_matrix(reference)
        if reference.shape != sequence.shape:
            raise DimensionMismatchError(f'Reference has shape {reference.shape}, frames have {sequence.shape}')
    else:
        frames = 25 if frames is None else frames
        if not 1 <= frames <= len(sequence):
            raise OperatorError(f'Invalid background window of {frames!r} frames for {len(sequence):d} frames')
        reference = np.median(sequence.frames[:frames], axis=0)
    return sequence.replace(sequence.frames - reference, background_subtracted=True)


class SequenceProcessor:
    """
    Represents a collection of configurable operators on frame sequences.
    """
    def __init__(self, config: Optional[Mapping[str, Any]] = None) -> None:
        """
        Initializes a new `SequenceProcessor`.

        :param config: Mapping with settings.
        """
        self.config: Dict[str, Any] = {}
        if config:
            self.config.update(config)

    @operator
    def subtract_background(self, sequence: FrameSequence, frames: Optional[int] = None,
                            reference: Optional[np.ndarray] = None) -> FrameSequence:
        """
        Subtracts a supplied reference frame or the median of the first
        frames from every frame.

        :param sequence: Frames to be processed
        :type sequence: FrameSequence
        :param frames: Number of leading frames for the median reference; taken
            from the ``video`` configuration if omitted
        :type frames: int or None
        :param reference: Explicit reference frame
        :type reference: numpy.ndarray or None
        :return: Residual frames
        :rtype: FrameSequence
        """
        if reference is None and frames is None:
            frames = int(self.config.get('video', {}).get('background_frames', 25))
        return subtract_background(sequence, frames=frames, reference=reference)


@dataclasses.dataclass(frozen=True)
class WindowPlan:
    """
    Sliding windows of ``window`` consecutive frames, advanced by ``stride``.
    """
    window: int = 10
    stride: int = 5

    def __post_init__(self) -> None:
        # Four frames are the minimum for estimating tr(Σ²)
        if self.window < 4:
            raise ValueError(f'Window must contain at least 4 frames: {self.window!r}')
        if self.stride < 1:
            raise ValueError(f'Invalid stride: {self.stride!r}')

    def count(self, frames: int) -> int:
        """
        Returns the number of windows in a sequence of the specified length.
        """
        return (frames - self.window) // self.stride + 1 if frames >= self.window else 0


def plan_windows(frames: int, plan: WindowPlan) -> List[Tuple[int, int]]:
    """
    Returns the zero-based half-open frame intervals of all windows.

    :param frames: Length of the sequence
    :type frames: int
    :param plan: Window length and stride
    :type plan: WindowPlan
    :return: ``(start, end)`` pairs in temporal order
    :rtype: list[tuple(int, int)]
    :raises ValueError: if the sequence is shorter than a window
    """
    if frames < plan.window:
        raise ValueError(f'Sequence of {frames:d} frames is shorter than the window of {plan.window:d}')
    return [(start, start + plan.window) for start in range(0, plan.stride * plan.count(frames), plan.stride)]


class ScanResult(NamedTuple):
    """
    Rank estimate of a single window.
    """
    window_index: int
    start_frame: int
    end_frame: int
    #: Sequential test record, ``None`` if the window failed
    record: Optional[RankScanRecord]
    #: Error message of a failed window
    error: Optional[str] = None

    @property
    def estimated_rank(self) -> Optional[int]:
        return None if self.record is None else self.record.estimated_rank


def scan(sequence: FrameSequence, plan: WindowPlan, alpha: float = 0.05, k_max: int = 5,
         method: RankMethod = RankMethod.PLUGIN_GN, options: Optional[RankTestOptions] = None,
         threads: int = 1) -> List[ScanResult]:
    """
    Estimates the rank of the mean of every window.

    Windows are processed independently. Numerical failures of a window are
    recorded in its result and do not stop the scan.

    :param sequence: Frames, usually with the background subtracted
    :type sequence: FrameSequence
    :param plan: Window length and stride
    :type plan: WindowPlan
    :param alpha: Significance level of every sequential test
    :param k_max: Largest rank to be tested
    :param method: Rank test
    :param options: Rank test settings
    :param threads: Number of worker threads
    :return: One result per window in temporal order
    :rtype: list[ScanResult]
    """
    windows = plan_windows(len(sequence), plan)

    def scan_window(indexed_window: Tuple[int, Tuple[int, int]]) -> ScanResult:
        index, (start, end) = indexed_window
        try:
            record = estimate_rank(sequence.frames[start:end], alpha=alpha, k_max=k_max, method=method,
                                   options=options)
        except (RankInferenceError, ArithmeticError) as e:
            logger.warning('Window %d (frames %d-%d) failed: %s', index, start, end, e)
            return ScanResult(index, start, end, None, str(e))
        return ScanResult(index, start, end, record)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(scan_window, enumerate(windows)))
    else:
        results = [scan_window(indexed) for indexed in enumerate(windows)]
    logger.info('Scanned %d windows, %d failed', len(results), sum(1 for result in results if result.error))
    return results


class DetectionMetrics(NamedTuple):
    """
    Confusion counts of window-level object detection.

    A rate whose denominator is zero is reported as zero.
    """
    false_positive_rate: float
    false_negative_rate: float
    true_positives: int
    false_positives: int
    true_negatives: int
    false_negatives: int
    #: Windows without a rank estimate
    skipped: int = 0


def _rank_of(item: Union[ScanResult, RankScanRecord, int, None]) -> Optional[int]:
    if isinstance(item, ScanResult):
        return item.estimated_rank
    if isinstance(item, RankScanRecord):
        return item.estimated_rank
    return item


def evaluate(results: Sequence[Union[ScanResult, RankScanRecord, int, None]],
             labels: Sequence[int]) -> DetectionMetrics:
    """
    Compares estimated ranks with ground-truth occupancy.

    A window is occupied if its label is positive. False positives are empty
    windows with a positive rank, false negatives occupied windows with rank
    zero. Windows without a rank estimate are skipped.

    :param results: Scan results, records, or plain ranks per window
    :param labels: Occupancy flags or object counts per window
    :return: Detection metrics
    :rtype: DetectionMetrics
    :raises ValueError: if the lengths differ
    """
    if len(results) != len(labels):
        raise ValueError(f'Got {len(results):d} windows but {len(labels):d} labels')
    tp = fp = tn = fn = skipped = 0
    for item, label in zip(results, labels):
        rank = _rank_of(item)
        if rank is None:
            skipped += 1
        elif label > 0:
            tp, fn = (tp + 1, fn) if rank > 0 else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if rank > 0 else (fp, tn + 1)
    return DetectionMetrics(
        false_positive_rate=fp / (fp + tn) if fp + tn else 0.0,
        false_negative_rate=fn / (fn + tp) if fn + tp else 0.0,
        true_positives=tp, false_positives=fp, true_negatives=tn, false_negatives=fn, skipped=skipped,
    )


def window_labels(counts: Sequence[int], windows: Sequence[Tuple[int, int]]) -> Tuple[int, ...]:
    """
    Returns the largest per-frame object count within every window.
    """
    counts = np.asarray(counts)
    return tuple(int(np.max(counts[start:end])) for start, end in windows)


class SyntheticFootage(NamedTuple):
    """
    Generated footage with its ground truth.
    """
    sequence: FrameSequence
    background: np.ndarray
    #: Number of objects visible in every frame
    counts: np.ndarray


#: Default object schedule: ``(top, left, first_frame, end_frame)``
DEFAULT_OBJECTS = ((10, 20, 150, 450), (35, 60, 250, 350))


def synthesize_footage(rows: int = 61, cols: int = 95, frames: int = 600, noise_sd: float = 0.02,
                       block: int = 8, intensity: float = 0.3,
                       objects: Sequence[Tuple[int, int, int, int]] = DEFAULT_OBJECTS,
                       seed: Union[int, np.random.SeedSequence] = 0) -> SyntheticFootage:
    """
    Generates a static gradient background with Gaussian sensor noise and
    square objects that appear and disappear on schedule.

    :param rows: Frame height
    :param cols: Frame width
    :param frames: Number of frames
    :param noise_sd: Standard deviation of the pixel noise
    :param block: Edge length of the square objects
    :param intensity: Brightness added by an object
    :param objects: ``(top, left, first_frame, end_frame)`` per object
    :param seed: Seed of the noise
    :return: Footage, the noiseless background, and per-frame object counts
    :rtype: SyntheticFootage
    """
    rng = make_rng(seed)
    gradient = (np.arange(rows)[:, np.newaxis] / max(rows - 1, 1) + np.arange(cols) / max(cols - 1, 1)) / 2
    background = 0.2 + 0.4 * gradient
    footage = background + noise_sd * rng.standard_normal((frames, rows, cols))
    counts = np.zeros(frames, dtype=int)
    for top, left, first, end in objects:
        if top + block > rows or left + block > cols:
            raise ValueError(f'Object at ({top}, {left}) does not fit into {rows}x{cols} frames')
        footage[first:end, top:top + block, left:left + block] += intensity
        counts[first:end] += 1
    sequence = FrameSequence(np.clip(footage, 0.0, 1.0), sources=(), synthetic=True)
    return SyntheticFootage(sequence=sequence, background=background, counts=counts)


TRACE_PREFIX = ('window_index', 'start_frame', 'estimated_rank', 'truncated')


class TraceRow(NamedTuple):
    """
    Row of a rank-trace CSV file.
    """
    window_index: int
    start_frame: int
    estimated_rank: Optional[int]
    truncated: Optional[bool]
    pvalues: Tuple[Tuple[int, float], ...]
    error: Optional[str]


def write_rank_trace(results: Sequence[ScanResult], file: IO, k_max: int) -> None:
    """
    Writes scan results as CSV with one p-value column per tested rank.
    Untested ranks and the estimates of failed windows are left empty.
    """
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(TRACE_PREFIX + tuple(f'pvalue_K{K}' for K in range(k_max + 1)) + ('error',))
    for result in results:
        pvalues = [''] * (k_max + 1)
        if result.record is None:
            writer.writerow([result.window_index, result.start_frame, '', ''] + pvalues + [result.error])
            continue
        for K, p_value in result.record.pvalues:
            pvalues[K] = repr(p_value)
        writer.writerow([result.window_index, result.start_frame, result.record.estimated_rank,
                         'true' if result.record.truncated else 'false'] + pvalues + [''])


def read_rank_trace(file: IO) -> List[TraceRow]:
    """
    Reads a rank-trace CSV file written by :func:`write_rank_trace`.

    :raises UnsupportedFormatError: if the header does not follow the rank-trace schema
    """
    reader = csv.reader(file)
    header = next(reader, None)
    if header is None or tuple(header[:4]) != TRACE_PREFIX or header[-1] != 'error':
        raise UnsupportedFormatError('Not a rank-trace CSV file')
    ranks = [int(column[len('pvalue_K'):]) for column in header[4:-1]]
    rows = []
    for fields in reader:
        if len(fields) != len(header):
            raise UnsupportedFormatError(f'Rank-trace row has {len(fields)} fields, expected {len(header)}')
        pvalues = tuple((K, float(value)) for K, value in zip(ranks, fields[4:-1]) if value)
        rows.append(TraceRow(
            window_index=int(fields[0]),
            start_frame=int(fields[1]),
            estimated_rank=int(fields[2]) if fields[2] else None,
            truncated={'true': True, 'false': False}.get(fields[3]),
            pvalues=pvalues,
            error=fields[-1] or None,
        ))
    return rows


def write_metrics(metrics: DetectionMetrics, file: IO) -> None:
    """
    Writes detection metrics as a two-line CSV file.
    """
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(DetectionMetrics._fields)
    writer.writerow([f'{value:.6f}' if isinstance(value, float) else value for value in metrics])


def write_plot_data(results: Sequence[ScanResult], file: IO) -> None:
    """
    Writes whitespace-separated ``start_frame estimated_rank`` columns for
    plotting the rank trace. Failed windows are written as ``NaN``.
    """
    file.write('# start_frame estimated_rank\n')
    for result in results:
        rank = 'NaN' if result.estimated_rank is None else str(result.estimated_rank)
        file.write(f'{result.start_frame} {rank}\n')


def read_labels(file: IO) -> Dict[int, int]:
    """
    Reads window labels from CSV rows ``window_index,label`` with an
    optional header.

    :raises UnsupportedFormatError: if a row is malformed
    """
    labels = {}
    for line_number, fields in enumerate(csv.reader(file), start=1):
        if not fields or (line_number == 1 and not fields[0].strip().lstrip('-').isdigit()):
            continue
        try:
            labels[int(fields[0])] = int(fields[1])
        except (IndexError, ValueError) as e:
            raise UnsupportedFormatError(f'Malformed label row {line_number}: {fields!r}') from e
    return labels

