"""
Command-line interface with the subcommands ``simulate``, ``test``,
``rank-scan``, and ``sparse-svd``.

Tables are written as CSV to the file given by ``--out`` or to standard
output. All randomness is derived from ``--seed``.
"""
import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Dict, IO, Iterator, List, Optional, Sequence

import numpy as np

from marta.core import Marta, Pipeline, RankInferenceError, UnsupportedFormatError
from marta.linalg import read_matrix_csv, read_samples, write_matrix_csv
from marta.penalty import PenaltyFamily
from marta.rank import RankMethod, test_rank_at
from marta.simulation import MODELS, METHODS, BenchCell, published_cells, run_monte_carlo, write_report_csv
from marta.sparse_svd import sparse_svd, sparse_svd_deflation
from marta import video


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_DEGENERATE = 3

TEST_COLUMNS = ('k', 'method', 'statistic', 'reference', 'df', 'p_value', 'alpha', 'reject')


@contextlib.contextmanager
def _output(path: Optional[str]) -> Iterator[IO]:
    if path is None or path == '-':
        yield sys.stdout
    else:
        with open(path, 'w', newline='', encoding='utf-8') as file:
            yield file


def _config(args: argparse.Namespace) -> Dict[str, Any]:
    config: Dict[str, Any] = {'threads': args.threads}
    if hasattr(args, 'k_max'):
        config['rank'] = {'alpha': args.alpha, 'k_max': args.k_max, 'method': args.method}
    if getattr(args, 'family', None):
        config['penalty'] = {'family': args.family}
    if getattr(args, 'window', None):
        config['video'] = {'window': args.window, 'stride': args.stride}
        if args.background_frames is not None:
            config['video']['background_frames'] = args.background_frames
    return config


def _fixed_penalties(args: argparse.Namespace, marta: Marta) -> Dict[str, Any]:
    if args.lambda_u is None and args.lambda_v is None:
        return {}
    svd = marta.svd_options().with_lambdas(args.lambda_u or 0.0, args.lambda_v or 0.0)
    return {'svd': svd, 'tune': False}


def run_simulate(args: argparse.Namespace) -> int:
    if args.grid:
        cells: List[BenchCell] = list(published_cells(args.model))
    else:
        model = MODELS[args.model](args.n, args.q, args.p, args.c)
        cells = [BenchCell(model, args.method)]
    marta = Marta(_config(args))
    report = run_monte_carlo(cells, args.reps, alpha=args.alpha, base_seed=args.seed, threads=marta.threads,
                             options=marta.rank_options(), timing=args.timing)
    with _output(args.out) as file:
        write_report_csv(report, file, timing=args.timing)
    return EXIT_OK


def _outcome_row(outcome, method: RankMethod) -> List[Any]:
    return [outcome.K_tested, method.value, repr(outcome.statistic), outcome.reference.value,
            '' if outcome.df is None else outcome.df, repr(outcome.p_value), f'{outcome.alpha:g}',
            'true' if outcome.reject else 'false']


def run_test(args: argparse.Namespace) -> int:
    marta = Marta(_config(args))
    if args.format == 'csv':
        samples = read_samples(args.samples)
    else:
        samples = marta.read_frames(args.samples, format=args.format).frames
    method = RankMethod(args.method)
    options = marta.rank_options(**_fixed_penalties(args, marta))
    if args.sequential:
        record = marta.estimate_rank(samples, **_fixed_penalties(args, marta))
        outcomes = record.outcomes
        logger.info('Estimated rank %d%s', record.estimated_rank, ' (truncated)' if record.truncated else '')
    else:
        outcomes = (test_rank_at(samples, args.k, alpha=args.alpha, method=method, options=options),)
    with _output(args.out) as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(TEST_COLUMNS)
        writer.writerows(_outcome_row(outcome, method) for outcome in outcomes)
    return EXIT_OK


def _read_reference(path: str, marta: Marta) -> np.ndarray:
    with open(path, 'rb') as file:
        return marta.read(file)


def run_rank_scan(args: argparse.Namespace) -> int:
    marta = Marta(_config(args))
    counts = None
    if args.synthetic:
        footage = video.synthesize_footage(seed=args.seed)
        sequence, counts = footage.sequence, footage.counts
        reference = footage.background if args.background_frames is None else None
    else:
        sequence = marta.read_frames(args.frames, format=args.format)
        reference = None
    if args.background is not None:
        reference = _read_reference(args.background, marta)

    processor = video.SequenceProcessor(marta.config)
    pipeline = Pipeline()
    if reference is not None:
        pipeline.add(processor.subtract_background(reference=reference))
    else:
        pipeline.add(processor.subtract_background(frames=args.background_frames))
    residuals, = pipeline.process(sequence)

    results = marta.scan(residuals, **_fixed_penalties(args, marta))
    with _output(args.out) as file:
        video.write_rank_trace(results, file, args.k_max)
    if args.plot:
        with open(args.plot, 'w', encoding='utf-8') as file:
            video.write_plot_data(results, file)

    if args.metrics:
        windows = [(result.start_frame, result.end_frame) for result in results]
        if args.labels:
            with open(args.labels, 'r', newline='', encoding='utf-8') as file:
                by_index = video.read_labels(file)
            missing = [result.window_index for result in results if result.window_index not in by_index]
            if missing:
                raise UnsupportedFormatError(f'Labels are missing for windows {missing[:5]!r}')
            labels: Sequence[int] = [by_index[result.window_index] for result in results]
        elif counts is not None:
            labels = video.window_labels(counts, windows)
        else:
            raise UnsupportedFormatError('Detection metrics require --labels or --synthetic')
        metrics = video.evaluate(results, labels)
        with open(args.metrics, 'w', newline='', encoding='utf-8') as file:
            video.write_metrics(metrics, file)
        logger.info('False-positive rate %.4f, false-negative rate %.4f',
                    metrics.false_positive_rate, metrics.false_negative_rate)

    if results and all(result.error for result in results):
        logger.error('Every window failed for numerical reasons')
        return EXIT_DEGENERATE
    return EXIT_OK


def run_sparse_svd(args: argparse.Namespace) -> int:
    xbar = read_matrix_csv(args.mean)
    options = Marta(_config(args)).svd_options().with_lambdas(args.lambda_u, args.lambda_v)
    fit = sparse_svd_deflation if args.deflation else sparse_svd
    result = fit(xbar, args.k, options)

    out = Path(args.out or '.')
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(result.triplet.U, out / 'U.csv')
    write_matrix_csv(result.triplet.sigma.reshape(-1, 1), out / 'sigma.csv')
    write_matrix_csv(result.triplet.V, out / 'V.csv')
    logger.info('support_rows=%d support_cols=%d iterations=%d converged=%s', len(result.support_rows),
                len(result.support_cols), result.iterations, str(result.converged).lower())
    return EXIT_OK


def _add_rank_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--method', choices=[method.value for method in RankMethod], default='plugin-gn',
                        help='Rank test (default: plugin-gn)')
    parser.add_argument('--alpha', type=float, default=0.05, help='Significance level (default: 0.05)')
    parser.add_argument('--k-max', type=int, default=5, help='Largest rank to be tested (default: 5)')
    parser.add_argument('--family', choices=[family.value for family in PenaltyFamily], default='scad',
                        help='Penalty of the sparse SVD (default: scad)')
    parser.add_argument('--lambda-u', type=float, default=None,
                        help='Fixed penalty level for the left factor; disables tuning')
    parser.add_argument('--lambda-v', type=float, default=None,
                        help='Fixed penalty level for the right factor; disables tuning')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='marta', description='Tests for the rank of a matrix-valued mean.')
    parser.add_argument('--seed', type=int, default=0, help='Seed of all random draws (default: 0)')
    parser.add_argument('--threads', type=int, default=1, help='Number of worker threads (default: 1)')
    parser.add_argument('--out', default=None, help='Output file, or directory for sparse-svd (default: stdout)')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='Increase log verbosity')
    commands = parser.add_subparsers(dest='command', required=True)

    simulate = commands.add_parser('simulate', help='Monte Carlo sizes and powers')
    simulate.add_argument('--model', choices=sorted(MODELS), default='a')
    simulate.add_argument('--n', type=int, default=50)
    simulate.add_argument('--q', type=int, default=50)
    simulate.add_argument('--p', type=int, default=50)
    simulate.add_argument('--c', type=float, default=0.0, help='Signal strength of the alternative')
    simulate.add_argument('--method', choices=METHODS, default='gn')
    simulate.add_argument('--reps', type=int, default=100)
    simulate.add_argument('--alpha', type=float, default=0.05)
    simulate.add_argument('--grid', action='store_true', help='Run the full published grid of the model')
    simulate.add_argument('--timing', action='store_true', help='Fill the seconds column')
    simulate.set_defaults(handler=run_simulate)

    test = commands.add_parser('test', help='Test the rank of the mean of a sample set')
    test.add_argument('--samples', required=True, help='Directory or list file of sample matrices')
    test.add_argument('--format', choices=('csv', 'pgm'), default='csv')
    selection = test.add_mutually_exclusive_group(required=True)
    selection.add_argument('--k', type=int, help='Rank under the null hypothesis')
    selection.add_argument('--sequential', action='store_true', help='Estimate the rank sequentially')
    _add_rank_arguments(test)
    test.set_defaults(handler=run_test)

    rank_scan = commands.add_parser('rank-scan', help='Sliding-window rank scan of a frame sequence')
    source = rank_scan.add_mutually_exclusive_group(required=True)
    source.add_argument('--frames', help='Directory or list file of frames')
    source.add_argument('--synthetic', action='store_true', help='Scan generated footage')
    rank_scan.add_argument('--format', choices=('pgm', 'csv'), default=None)
    rank_scan.add_argument('--window', type=int, default=10)
    rank_scan.add_argument('--stride', type=int, default=5)
    rank_scan.add_argument('--background-frames', type=int, default=None,
                           help='Subtract the median of the first frames (default: 25)')
    rank_scan.add_argument('--background', default=None, help='Reference frame file to subtract')
    rank_scan.add_argument('--labels', default=None, help='CSV with window_index,label rows')
    rank_scan.add_argument('--metrics', default=None, help='Output file of the detection metrics')
    rank_scan.add_argument('--plot', default=None, help='Output file of the plot data')
    _add_rank_arguments(rank_scan)
    rank_scan.set_defaults(handler=run_rank_scan)

    svd = commands.add_parser('sparse-svd', help='Sparse SVD of a mean matrix')
    svd.add_argument('--mean', required=True, help='CSV file of the mean matrix')
    svd.add_argument('--k', type=int, required=True)
    svd.add_argument('--lambda-u', type=float, default=0.0)
    svd.add_argument('--lambda-v', type=float, default=0.0)
    svd.add_argument('--family', choices=[family.value for family in PenaltyFamily], default='scad')
    svd.add_argument('--deflation', action='store_true', help='Fit one singular pair at a time')
    svd.set_defaults(handler=run_sparse_svd)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except (UnsupportedFormatError, FileNotFoundError, ValueError) as e:
        logger.error('%s', e)
        return EXIT_INPUT_ERROR
    except (RankInferenceError, ArithmeticError) as e:
        logger.error('%s', e)
        return EXIT_DEGENERATE


if __name__ == '__main__':
    sys.exit(main())
