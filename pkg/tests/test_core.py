import unittest.mock

import numpy as np
import pytest
from frozendict import frozendict

from marta.core import Pipeline, PenaltyTooAggressiveError, RankDeficiencyError, RankInferenceError, \
    _immutable, list_sources, operator
from marta.video import FrameSequence
from assets import frame_sequence


class TestImmutableHelpers:
    def test_immutable_converts_nested_containers(self):
        value = dict(sources=['a', 'b'], tags={'x'}, nested=dict(k=[1]))

        frozen = _immutable(value)

        assert isinstance(frozen, frozendict)
        assert frozen['sources'] == ('a', 'b')
        assert frozen['tags'] == frozenset({'x'})
        assert frozen['nested']['k'] == (1,)


class TestErrors:
    def test_penalty_too_aggressive_error_is_a_rank_deficiency_error(self):
        error = PenaltyTooAggressiveError(0.5, 'U')

        assert isinstance(error, RankDeficiencyError)
        assert error.lam == 0.5
        assert error.factor == 'U'
        assert '0.5' in str(error)

    def test_rank_inference_error_carries_rank_and_cause(self):
        cause = ArithmeticError('boom')

        error = RankInferenceError(2, cause)

        assert error.k == 2
        assert error.cause is cause


class TestListSources:
    def test_directory_is_expanded_in_lexicographic_order(self, tmp_path):
        for name in ('b.csv', 'a.csv', 'c.txt', 'a10.csv'):
            (tmp_path / name).write_text('0')

        sources = list_sources(tmp_path, ('.csv',))

        assert [source.name for source in sources] == ['a.csv', 'a10.csv', 'b.csv']

    def test_list_file_resolves_relative_paths_and_skips_blank_lines(self, tmp_path):
        (tmp_path / 'frames').mkdir()
        list_file = tmp_path / 'frames.txt'
        list_file.write_text('frames/second.csv\n\nframes/first.csv\n')

        sources = list_sources(list_file, ('.csv',))

        assert sources == [tmp_path / 'frames' / 'second.csv', tmp_path / 'frames' / 'first.csv']

    def test_raises_error_for_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            list_sources(tmp_path / 'missing', ('.csv',))


class TestOperator:
    def test_operator_returns_configured_callable(self):
        class Doubler:
            @operator
            def scale(self, value, factor=1):
                return value * factor

        scale = Doubler().scale(factor=2)

        assert scale(21) == 42

    def test_operator_rejects_positional_configuration(self):
        class Doubler:
            @operator
            def scale(self, value, factor=1):
                return value * factor

        with pytest.raises(TypeError):
            Doubler().scale(2)


@pytest.mark.usefixtures('frame_sequence')
class TestPipeline:
    @pytest.fixture
    def pipeline(self):
        return Pipeline()

    def test_empty_pipeline_does_not_change_sequences(self, pipeline, frame_sequence):
        other_sequence = FrameSequence(np.zeros((2, 3, 3)))

        processed = list(pipeline.process(frame_sequence, other_sequence))

        assert processed == [frame_sequence, other_sequence]

    def test_pipeline_contains_operator_after_it_was_added(self, pipeline):
        operator = unittest.mock.MagicMock()

        pipeline.add(operator)

        assert operator in pipeline.operators

    def test_operator_is_applied_to_sequences_when_process_is_called(self, pipeline, frame_sequence):
        operator = unittest.mock.MagicMock()
        pipeline.add(operator)

        [processed for processed in pipeline.process(frame_sequence)]

        operator.assert_called_once_with(frame_sequence)

    def test_operators_are_applied_in_insertion_order(self, pipeline):
        pipeline.add(lambda value: value + 1)
        pipeline.add(lambda value: value * 10)

        assert list(pipeline.process(1, 2)) == [20, 30]
