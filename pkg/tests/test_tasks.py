import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsicl.errors import GeometryError
from tsicl.series import ChannelSeries
from tsicl.tasks import (
    MASK_FLAG,
    SEGMENT_FLAG,
    VALUE,
    TaskKind,
    WindowSpec,
    gen_backtrace,
    gen_forecast,
    gen_impute,
    sample_mask_positions,
)


def series_of(n, offset=0):
    return ChannelSeries("d", "c", np.arange(n, dtype=float), origin_offset=offset)


class TestWindowSpec:
    def test_lookback_must_be_twice_horizon(self):
        with pytest.raises(GeometryError, match="2\\*horizon"):
            WindowSpec(10, 4)

    @pytest.mark.parametrize("L,h", [(2, 1), (24, 12), (192, 96), (384, 192)])
    def test_valid_pairs(self, L, h):
        assert WindowSpec(L, h).lookback == 2 * h


class TestForecast:
    def test_definition(self):
        ex = gen_forecast(series_of(10), 0, WindowSpec(4, 2))
        assert np.array_equal(ex.input[:, VALUE], [0, 1, 2, 3])
        assert np.array_equal(ex.input[:, MASK_FLAG], [0, 0, 0, 0])
        assert np.array_equal(ex.target, [4, 5])
        assert (ex.source_span.start, ex.source_span.end) == (0, 6)

    def test_last_window_valid(self):
        ex = gen_forecast(series_of(10), 4, WindowSpec(4, 2))
        assert np.array_equal(ex.target, [8, 9])

    def test_out_of_range(self):
        with pytest.raises(GeometryError, match="out of range"):
            gen_forecast(series_of(10), 5, WindowSpec(4, 2))

    def test_span_uses_absolute_offsets(self):
        ex = gen_forecast(series_of(10, offset=100), 2, WindowSpec(4, 2))
        assert (ex.source_span.start, ex.source_span.end) == (102, 108)


class TestBacktrace:
    def test_definition(self):
        ex = gen_backtrace(series_of(10), 2, WindowSpec(4, 2))
        assert np.array_equal(ex.input[:, VALUE], [2, 3, 4, 5])
        assert np.array_equal(ex.target, [0, 1])  # chronological order
        assert (ex.source_span.start, ex.source_span.end) == (0, 6)

    def test_start_at_horizon_boundary(self):
        ex = gen_backtrace(series_of(10), 2, WindowSpec(4, 2))
        assert ex.target[0] == 0.0

    def test_insufficient_history(self):
        with pytest.raises(GeometryError, match="insufficient history"):
            gen_backtrace(series_of(10), 1, WindowSpec(4, 2))


def reference_mask_draw(seed_args, n, k):
    """Independent re-implementation of the documented selection-sampling scheme."""
    rng = np.random.default_rng(np.random.SeedSequence(seed_args))
    idx = list(range(n))
    for i in range(k):
        j = int(rng.integers(i, n))
        idx[i], idx[j] = idx[j], idx[i]
    return sorted(idx[:k])


class TestImpute:
    def find_seed_masking(self, wanted, n=4, k=2):
        for seed in range(2000):
            if reference_mask_draw((seed,), n, k) == wanted:
                return seed
        raise AssertionError(f"no seed under 2000 masks {wanted}")

    def test_oracle_enumerated_draw(self):
        # locate a seed whose documented sampling scheme masks {1, 3}, via the
        # independent reference implementation, then check the generator
        seed = self.find_seed_masking([1, 3])
        rng = np.random.default_rng(np.random.SeedSequence((seed,)))
        ex = gen_impute(series_of(10), 0, WindowSpec(4, 2), rng)
        assert np.array_equal(ex.input[:, VALUE], [0, 0, 2, 0])
        assert np.array_equal(ex.input[:, MASK_FLAG], [0, 1, 0, 1])
        assert np.array_equal(ex.target, [1, 3])

    def test_masked_count_nearly_all(self):
        # h = L - 1 leaves exactly one unmasked position
        rng = np.random.default_rng(0)
        s = series_of(10)
        L, h = 4, 3
        positions = sample_mask_positions(rng, L, h)
        assert len(positions) == h and len(set(positions)) == h

    def test_same_seed_same_mask(self):
        w = WindowSpec(8, 4)
        a = gen_impute(series_of(20), 3, w, np.random.default_rng(42))
        b = gen_impute(series_of(20), 3, w, np.random.default_rng(42))
        assert np.array_equal(a.input, b.input)
        assert np.array_equal(a.target, b.target)

    def test_mask_count_must_fit(self):
        # h >= L can only arise with a hand-built window (WindowSpec pins L = 2h)
        class FakeWindow:
            lookback, horizon = 4, 4

        with pytest.raises(GeometryError, match="smaller than window"):
            gen_impute(series_of(10), 0, FakeWindow(), np.random.default_rng(0))

    def test_window_out_of_range(self):
        with pytest.raises(GeometryError, match="out of range"):
            gen_impute(series_of(5), 2, WindowSpec(4, 2), np.random.default_rng(0))

    def test_uniformity_of_positions(self):
        # each position should be masked with probability h/L
        rng = np.random.default_rng(9)
        n, k, draws = 6, 3, 6000
        counts = np.zeros(n)
        for _ in range(draws):
            for pos in sample_mask_positions(rng, n, k):
                counts[pos] += 1
        expected = draws * k / n
        sigma = np.sqrt(draws * (k / n) * (1 - k / n))
        assert np.all(np.abs(counts - expected) < 5 * sigma)


@st.composite
def window_and_series(draw):
    h = draw(st.integers(min_value=1, max_value=6))
    w = WindowSpec(2 * h, h)
    n = draw(st.integers(min_value=3 * h + 2, max_value=120))
    offset = draw(st.integers(min_value=0, max_value=50))
    return w, series_of(n, offset=offset), draw(st.integers(min_value=0, max_value=2**31))


class TestCrossTaskInvariants:
    @given(window_and_series())
    @settings(max_examples=150, deadline=None)
    def test_alignment_reconstruction_and_spans(self, case):
        w, s, seed = case
        rng = np.random.default_rng(seed)
        L, h = w.lookback, w.horizon
        t_fore = int(rng.integers(0, len(s) - L - h + 1))
        t_back = int(rng.integers(h, len(s) - L + 1))
        t_imp = int(rng.integers(0, len(s) - L + 1))

        fore = gen_forecast(s, t_fore, w)
        back = gen_backtrace(s, t_back, w)
        imp = gen_impute(s, t_imp, w, rng)

        for ex in (fore, back, imp):
            assert ex.input.shape == (L, 3)
            assert ex.target.shape == (h,)
            assert np.all(ex.input[ex.input[:, MASK_FLAG] == 1, VALUE] == 0)
            assert np.all(ex.input[:, SEGMENT_FLAG] == 0)

        # reconstruction against the source series
        assert np.array_equal(
            np.concatenate([fore.input[:, VALUE], fore.target]),
            s.values[t_fore : t_fore + L + h],
        )
        assert np.array_equal(
            np.concatenate([back.target, back.input[:, VALUE]]),
            s.values[t_back - h : t_back + L],
        )
        masked = imp.masked_positions
        unmasked = np.setdiff1d(np.arange(L), masked)
        window = s.values[t_imp : t_imp + L]
        assert np.array_equal(imp.input[unmasked, VALUE], window[unmasked])
        assert np.array_equal(imp.target, window[masked])
        assert len(masked) == h

        # spans cover exactly what is read or predicted (absolute coordinates)
        assert (fore.source_span.start, fore.source_span.end) == (
            s.origin_offset + t_fore,
            s.origin_offset + t_fore + L + h,
        )
        assert (back.source_span.start, back.source_span.end) == (
            s.origin_offset + t_back - h,
            s.origin_offset + t_back + L,
        )
        assert (imp.source_span.start, imp.source_span.end) == (
            s.origin_offset + t_imp,
            s.origin_offset + t_imp + L,
        )

    def test_byte_level_determinism(self):
        w = WindowSpec(8, 4)
        s = series_of(40)
        blobs = []
        for _ in range(2):
            rng = np.random.default_rng(np.random.SeedSequence((11, 3)))
            ex = gen_impute(s, 5, w, rng)
            blobs.append(ex.input.tobytes() + ex.target.tobytes())
        assert blobs[0] == blobs[1]

    def test_task_kind_serialization_names(self):
        assert [str(t) for t in TaskKind] == ["forecast", "impute", "backtrace"]
