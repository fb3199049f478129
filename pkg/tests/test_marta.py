import io

import numpy as np
import pytest

from marta import Marta
from marta.core import UnsupportedFormatError
from marta.penalty import PenaltyFamily
from marta.rank import RankMethod
from marta.video import FrameSequence
from assets import DEFAULT_FRAMES
from assets import gray_frame, pgm_data
from assets import pgm_frame_directory, rank_two_samples, unknown_data


class TestMarta:
    @pytest.fixture(name='manager', scope='class')
    def marta_instance(self):
        return Marta()

    def test_stores_configuration(self):
        config = dict(foo='bar')
        manager = Marta(config)

        assert manager.config['foo'] == 'bar'

    def test_configuration_is_copied(self):
        config = dict(threads=2)
        manager = Marta(config)

        config['threads'] = 5

        assert manager.threads == 2

    def test_threads_are_at_least_one(self):
        assert Marta(dict(threads=0)).threads == 1

    def test_get_processor_returns_processor_for_readable_data(self, manager):
        processor = manager.get_processor(io.BytesIO(pgm_data(gray_frame())))

        assert processor.format == 'pgm'

    def test_get_processor_returns_none_for_unreadable_data(self, manager, unknown_data):
        processor = manager.get_processor(io.BytesIO(unknown_data))

        assert processor is None

    def test_get_processor_respects_format(self, manager):
        processor = manager.get_processor(io.BytesIO(pgm_data(gray_frame())), format='csv')

        assert processor is None

    def test_get_processor_does_not_change_file_seek_position(self, manager):
        with io.BytesIO(pgm_data(gray_frame())) as file:
            manager.get_processor(file)
            assert file.tell() == 0

    def test_read_returns_matrix(self, manager):
        matrix = manager.read(io.BytesIO(b'0.5,0.25\n1,0\n'))

        assert np.array_equal(matrix, [[0.5, 0.25], [1.0, 0.0]])

    def test_read_raises_error_when_format_is_unknown(self, manager, unknown_data):
        with pytest.raises(UnsupportedFormatError):
            manager.read(io.BytesIO(unknown_data))

    def test_read_raises_error_when_file_is_none(self, manager):
        invalid_file = None

        with pytest.raises(TypeError):
            manager.read(invalid_file)

    def test_read_frames_returns_sequence(self, manager, pgm_frame_directory):
        sequence = manager.read_frames(pgm_frame_directory)

        assert isinstance(sequence, FrameSequence)
        assert len(sequence) == DEFAULT_FRAMES


class TestConfiguredOptions:
    def test_svd_options_are_read_from_configuration(self):
        manager = Marta(dict(sparse_svd=dict(max_iters=50, tol=1e-8), penalty=dict(family='mcp', a=2.5)))

        options = manager.svd_options()

        assert options.max_iters == 50
        assert options.tol == 1e-8
        assert options.penalty_u.family is PenaltyFamily.MCP
        assert options.penalty_v.a == 2.5
        assert options.penalty_u.lam == 0.0

    def test_rank_options_are_read_from_configuration(self):
        manager = Marta(dict(tuning=dict(grid_points=4, split_fraction=0.6, every_k=True), threads=3))

        options = manager.rank_options()

        assert options.grid_points == 4
        assert options.split_fraction == 0.6
        assert options.tune_every_k
        assert options.threads == 3

    def test_rank_options_overrides_replace_configuration(self):
        manager = Marta(dict(tuning=dict(grid_points=4)))

        options = manager.rank_options(grid_points=6, tune=False)

        assert options.grid_points == 6
        assert not options.tune


@pytest.mark.usefixtures('rank_two_samples')
class TestConfiguredInference:
    @pytest.fixture(name='manager', scope='class')
    def configured_instance(self):
        return Marta(dict(rank=dict(method='min-discrepancy-chi2', k_max=2, alpha=0.01),
                          video=dict(window=5, stride=5)))

    def test_estimate_rank_uses_configured_method(self, manager, rank_two_samples):
        record = manager.estimate_rank(rank_two_samples, sigma0_sq=0.25)

        assert record.method is RankMethod.MIN_DISCREPANCY_CHI2
        assert record.K_max == 2
        assert record.alpha == 0.01
        assert record.estimated_rank == 2

    def test_scan_uses_configured_windows(self, manager, rank_two_samples):
        results = manager.scan(FrameSequence(rank_two_samples[:20]))

        assert [result.start_frame for result in results] == [0, 5, 10, 15]
        assert all(result.record.K_max == 2 for result in results)
