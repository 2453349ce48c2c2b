import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsicl.context import (
    ContextSequence,
    assemble,
    build_context_dataset,
    count_disjoint_starts,
    read_jsonl,
    sample_demos,
    sample_task,
    write_jsonl,
)
from tsicl.errors import DataError
from tsicl.series import ChannelSeries
from tsicl.tasks import MASK_FLAG, SEGMENT_FLAG, VALUE, Span, TaskKind, WindowSpec, gen_forecast

W42 = WindowSpec(4, 2)


def series_of(n, channel="c", offset=0, split="train"):
    return ChannelSeries("d", channel, np.arange(n, dtype=float), origin_offset=offset, split=split)


class TestSampleTask:
    def test_singleton(self):
        rng = np.random.default_rng(0)
        assert all(sample_task(rng, {TaskKind.FORECAST}) is TaskKind.FORECAST for _ in range(20))

    def test_empty_set(self):
        with pytest.raises(DataError, match="empty"):
            sample_task(np.random.default_rng(0), set())

    def test_uniform_over_two_tasks(self):
        # binomial(10000, 0.5): sigma = 50, so +-3 sigma = +-150 around 5000
        rng = np.random.default_rng(123)
        k = {TaskKind.FORECAST, TaskKind.IMPUTE}
        n_fore = sum(sample_task(rng, k) is TaskKind.FORECAST for _ in range(10_000))
        assert abs(n_fore - 5000) <= 150


class TestSampleDemos:
    def test_disjointness_forced(self):
        pool = [series_of(40)]
        query_span = Span("d", "c", 0, 6)
        demos = sample_demos(pool, query_span, TaskKind.FORECAST, 1, W42, np.random.default_rng(0))
        assert len(demos) == 1
        assert demos[0].source_span.start >= 6
        assert demos[0].source_span.end <= 40

    def test_insufficient_reports_available_count(self):
        pool = [series_of(12)]
        query_span = Span("d", "c", 0, 6)
        available = count_disjoint_starts(pool, query_span, TaskKind.FORECAST, W42)
        m = available + 5
        with pytest.raises(DataError, match="insufficient disjoint demo windows") as err:
            # pairwise_disjoint makes window starts actually run out
            sample_demos(
                pool, query_span, TaskKind.FORECAST, m, W42, np.random.default_rng(0),
                pairwise_disjoint=True,
            )
        assert f"needed {m}" in str(err.value)

    def test_zero_demos(self):
        assert sample_demos([series_of(40)], Span("d", "c", 0, 6), TaskKind.FORECAST, 0, W42, np.random.default_rng(0)) == []

    def test_pairwise_disjoint_flag(self):
        pool = [series_of(60)]
        query_span = Span("d", "c", 0, 6)
        demos = sample_demos(
            pool, query_span, TaskKind.FORECAST, 5, W42, np.random.default_rng(3),
            pairwise_disjoint=True,
        )
        spans = [d.source_span for d in demos]
        for i in range(len(spans)):
            for j in range(i + 1, len(spans)):
                assert not spans[i].overlaps(spans[j])

    def test_demos_may_overlap_each_other_by_default(self):
        pool = [series_of(14)]  # only a handful of start positions
        query_span = Span("d", "c", 0, 6)
        demos = sample_demos(pool, query_span, TaskKind.FORECAST, 6, W42, np.random.default_rng(1))
        assert len(demos) == 6  # more demos than disjoint slots: overlap happened


class TestAssemble:
    def test_empty_context_identity(self):
        q = gen_forecast(series_of(10), 0, W42)
        out = assemble(ContextSequence(TaskKind.FORECAST, ()), q)
        assert np.array_equal(out.tokens, q.input)
        assert np.array_equal(out.target, q.target)

    def test_paper_scale_token_count(self):
        w = WindowSpec(192, 96)
        s = series_of(288 * 6)
        demos = tuple(gen_forecast(s, 288 * (i + 1), w) for i in range(4))
        q = gen_forecast(s, 0, w)
        out = assemble(ContextSequence(TaskKind.FORECAST, demos), q)
        assert len(out.tokens) == 4 * 288 + 192 == 1344

    def test_hand_built_concatenation(self):
        s = series_of(40)
        d1, d2 = gen_forecast(s, 10, W42), gen_forecast(s, 20, W42)
        q = gen_forecast(s, 0, W42)
        out = assemble(ContextSequence(TaskKind.FORECAST, (d1, d2)), q)
        expected_values = np.concatenate(
            [s.values[10:14], s.values[14:16], s.values[20:24], s.values[24:26], s.values[0:4]]
        )
        assert np.array_equal(out.tokens[:, VALUE], expected_values)
        assert np.array_equal(out.tokens[:, SEGMENT_FLAG], [0, 0, 0, 0, 1, 1] * 2 + [0, 0, 0, 0])
        assert np.all(out.tokens[:, MASK_FLAG] == 0)

    def test_task_mismatch(self):
        s = series_of(40)
        demo = gen_forecast(s, 10, W42)
        from tsicl.tasks import gen_backtrace

        q = gen_backtrace(s, 5, W42)
        with pytest.raises(DataError, match="does not match"):
            assemble(ContextSequence(TaskKind.FORECAST, (demo,)), q)

    def test_geometry_mismatch(self):
        sm = gen_forecast(series_of(20), 0, W42)
        big = gen_forecast(series_of(40), 0, WindowSpec(8, 4))
        with pytest.raises(Exception, match="geometry"):
            assemble(ContextSequence(TaskKind.FORECAST, (sm,)), big)


class TestBuildDataset:
    def test_single_window(self):
        ds = build_context_dataset([series_of(6)], {TaskKind.FORECAST}, W42, 0, stride=1, seed=0)
        assert len(ds) == 1

    def test_deterministic_bytes(self, tmp_path):
        series = [series_of(60)]
        blobs = []
        for run in range(2):
            ds = build_context_dataset(series, {TaskKind.FORECAST, TaskKind.IMPUTE}, W42, 2, stride=3, seed=9)
            path = tmp_path / f"run{run}.jsonl"
            write_jsonl(ds, path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_window_count_matches_enumeration(self):
        # L=8, h=4, stride 4, length 60, forecast-only: starts {0,4,...,48} -> 13
        w = WindowSpec(8, 4)
        ds = build_context_dataset([series_of(60)], {TaskKind.FORECAST}, w, 0, stride=4, seed=0)
        expected = len([t for t in range(0, 60 - 8 + 1, 4) if t + 12 <= 60])
        assert expected == 13
        assert len(ds) == 13

    def test_skips_are_counted(self):
        # backtrace start 0 lacks history, so some windows are skipped
        ds = build_context_dataset([series_of(30)], {TaskKind.BACKTRACE}, W42, 0, stride=2, seed=1)
        assert ds.skipped_windows >= 1
        for s in ds.samples:
            assert s.task is TaskKind.BACKTRACE

    def test_empty_result(self):
        # forecast never fits: series shorter than L+h windows at every stride start
        with pytest.raises(DataError, match="cannot fit|empty dataset"):
            build_context_dataset([series_of(5)], {TaskKind.FORECAST}, W42, 0, stride=1, seed=0)

    def test_demo_pool_split_enforced(self):
        bad_pool = [series_of(40, split="valid")]
        with pytest.raises(DataError, match="train-split"):
            build_context_dataset(
                [series_of(40)], {TaskKind.FORECAST}, W42, 1, stride=4, seed=0, demo_pool=bad_pool
            )

    def test_jsonl_round_trip(self, tmp_path):
        ds = build_context_dataset(
            [series_of(60)], {TaskKind.FORECAST, TaskKind.IMPUTE}, W42, 2, stride=5, seed=4
        )
        path = tmp_path / "ds.jsonl"
        write_jsonl(ds, path)
        loaded = read_jsonl(path)
        assert len(loaded) == len(ds)
        assert loaded.window == ds.window
        assert (loaded.demo_count, loaded.seed, loaded.stride) == (ds.demo_count, ds.seed, ds.stride)
        for a, b in zip(loaded.samples, ds.samples):
            assert a.task is b.task
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.target, b.target)
            assert a.query_span == b.query_span
            assert a.demo_spans == b.demo_spans
        # serialization is value-exact, so a second write is byte-identical
        path2 = tmp_path / "ds2.jsonl"
        loaded.extra = ds.extra
        write_jsonl(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()


@st.composite
def build_config(draw):
    h = draw(st.integers(min_value=1, max_value=4))
    w = WindowSpec(2 * h, h)
    n = draw(st.integers(min_value=4 * (3 * h), max_value=240))
    m = draw(st.integers(min_value=0, max_value=8))
    tasks = draw(
        st.sets(st.sampled_from([TaskKind.FORECAST, TaskKind.IMPUTE, TaskKind.BACKTRACE]), min_size=1)
    )
    seed = draw(st.integers(min_value=0, max_value=2**31))
    stride = draw(st.integers(min_value=1, max_value=2 * h))
    return w, n, m, tasks, seed, stride


class TestStructuralInvariants:
    @given(build_config())
    @settings(max_examples=60, deadline=None)
    def test_emitted_samples_are_well_formed(self, cfg):
        w, n, m, tasks, seed, stride = cfg
        series = [series_of(n)]
        try:
            ds = build_context_dataset(series, tasks, w, m, stride=stride, seed=seed)
        except DataError:
            return  # pool too small for m disjoint demos: acceptable outcome
        L, h = w.lookback, w.horizon
        for sample in ds.samples:
            assert len(sample.tokens) == m * (L + h) + L
            assert len(sample.target) == h
            assert len(sample.demo_spans) == m
            for span in sample.demo_spans:
                assert not span.overlaps(sample.query_span)
                # demos must come from the train-split pool
                assert span.start >= 0 and span.end <= n
