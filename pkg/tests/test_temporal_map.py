import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapdiff.temporal_map import (
    MomentInterval,
    MultiScaleMaps,
    ScoreMap2D,
    VideoGrid,
    aggregate_multiscale,
    build_iou_map,
    extract_multiscale,
    scale_index,
    top_n_moments,
    valid_mask,
)

from oracles import oracle_iou, oracle_source


@st.composite
def grid_and_moment(draw, max_n=32):
    n = draw(st.integers(1, max_n))
    tau = draw(st.floats(0.25, 5.0))
    dur = n * tau
    s = draw(st.floats(0, dur * 0.999))
    e = draw(st.floats(s + 1e-3 * tau, dur).filter(lambda x: x > s))
    return VideoGrid(n, tau), MomentInterval(s, e)


class TestBuildIouMap:
    def test_examples(self):
        grid = VideoGrid(3, 5.0)
        y = build_iou_map(grid, MomentInterval(5, 15))
        assert y.values[1, 1] == 1.0
        assert y.values[0, 2] == pytest.approx(10 / 15, abs=1e-12)
        assert y.values[0, 0] == 0.0

    def test_invalid_cells_zero(self):
        y = build_iou_map(VideoGrid(5, 1.0), MomentInterval(0.5, 3.2))
        assert np.all(y.values[~valid_mask(5)] == 0)
        assert np.all((y.values >= 0) & (y.values <= 1))

    def test_errors(self):
        with pytest.raises(ValueError):
            build_iou_map(VideoGrid(3, 5.0), MomentInterval(5, 16))
        with pytest.raises(ValueError):
            MomentInterval(4, 4)
        with pytest.raises(ValueError):
            MomentInterval(-1, 4)

    @given(grid_and_moment())
    @settings(max_examples=200, deadline=None)
    def test_matches_oracle(self, gm):
        grid, gt = gm
        y = build_iou_map(grid, gt)
        n, tau = grid.n_segments, grid.unit
        for i in range(n):
            for j in range(n - i):
                ref = oracle_iou(i * tau, i * tau + (j + 1) * tau, gt.start, gt.end)
                assert abs(y.values[i, j] - ref) <= 1e-12

    @given(st.integers(1, 20), st.data())
    def test_single_perfect_cell_iff_aligned(self, n, data):
        i = data.draw(st.integers(0, n - 1))
        j = data.draw(st.integers(0, n - 1 - i))
        grid = VideoGrid(n, 1.0)
        y = build_iou_map(grid, grid.moment(i, j))
        assert np.count_nonzero(y.values == 1.0) == 1
        assert y.values[i, j] == 1.0
        shifted = build_iou_map(grid, MomentInterval(i + 0.3, i + j + 1 - 0.1))
        assert np.count_nonzero(shifted.values == 1.0) == 0


class TestMultiScale:
    def test_identity_single_scale(self):
        rng = np.random.default_rng(0)
        y = ScoreMap2D(VideoGrid(6), rng.uniform(size=(6, 6)))
        ms = extract_multiscale(y, 1, 6)
        np.testing.assert_array_equal(ms.maps[0], y.values)

    def test_index_examples(self):
        rng = np.random.default_rng(1)
        y = ScoreMap2D(VideoGrid(8), rng.uniform(size=(8, 8)))
        ms = extract_multiscale(y, 2, 4)
        assert ms.maps[1].shape == (4, 4)
        assert ms.maps[1][1, 0] == y.values[2, 1]
        assert not ms.valid[1][3, 3]
        assert ms.maps[1][3, 3] == 0.0

    def test_coverage_error(self):
        with pytest.raises(ValueError):
            extract_multiscale(ScoreMap2D(VideoGrid(16), np.zeros((16, 16))), 2, 7)

    @pytest.mark.parametrize("n", [1, 5, 8, 13, 16])
    @pytest.mark.parametrize("k_total", [1, 2, 3])
    def test_index_rule_brute_force(self, n, k_total):
        anchors = -(-n // 2 ** (k_total - 1))
        for k in range(k_total):
            src_i, src_j, valid = scale_index(n, k, anchors)
            for a in range(src_i.shape[0]):
                for b in range(anchors):
                    i, j = oracle_source(k, a, b)
                    expect_valid = i + j + 1 <= n
                    assert valid[a, b] == expect_valid
                    if expect_valid:
                        assert (src_i[a, b], src_j[a, b]) == (i, j)

    def test_scale_moment_matches_source_cell(self):
        grid = VideoGrid(16, 0.5)
        ms = extract_multiscale(ScoreMap2D(grid, np.zeros((16, 16))), 3, 4)
        for k in range(3):
            for a, b in zip(*np.nonzero(ms.valid[k])):
                assert ms.moment(k, a, b) == grid.moment(*oracle_source(k, a, b))

    def test_aggregate_takes_max(self):
        grid = VideoGrid(8)
        maps = [np.zeros((8, 4)), np.zeros((4, 4))]
        valid = [scale_index(8, k, 4)[2] for k in range(2)]
        # scale-1 cell (0, 0) and scale-0 cell (0, 1) both denote moment (0, 2)
        maps[0][0, 1], maps[1][0, 0] = 0.3, 0.8
        agg = aggregate_multiscale(MultiScaleMaps(grid, 2, 4, maps, valid))
        assert agg.values[0, 1] == 0.8

    def test_coverage_enumeration(self):
        grid = VideoGrid(8)
        rng = np.random.default_rng(2)
        y = ScoreMap2D(grid, rng.uniform(size=(8, 8)))
        ms = extract_multiscale(y, 2, 4)
        ms.maps[1][:] = 5.0  # would win wherever scale 1 covers
        agg = aggregate_multiscale(ms)
        covering = {}
        for k in range(2):
            for a, b in zip(*np.nonzero(ms.valid[k])):
                covering.setdefault(oracle_source(k, a, b), []).append(k)
        assert covering[(1, 0)] == [0]
        assert agg.values[1, 0] == y.values[1, 0]
        for (i, j), ks in covering.items():
            assert agg.covered[i, j]
            assert agg.values[i, j] == (5.0 if 1 in ks else y.values[i, j])
        assert agg.covered.sum() == len(covering)

    @given(st.integers(1, 32), st.integers(1, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, n, scales, seed):
        anchors = -(-n // 2 ** (scales - 1))
        y = ScoreMap2D(VideoGrid(n), np.random.default_rng(seed).uniform(size=(n, n)))
        agg = aggregate_multiscale(extract_multiscale(y, scales, anchors))
        np.testing.assert_array_equal(agg.values[agg.covered], y.values[agg.covered])


class TestTopN:
    def test_one_hot(self):
        v = np.zeros((4, 4))
        v[2, 1] = 1.0
        top = top_n_moments(ScoreMap2D(VideoGrid(4, 2.0), v), 3)
        assert top[0] == (MomentInterval(4.0, 8.0), 1.0)
        assert len(top) == 3

    def test_tie_prefers_earlier_start(self):
        v = np.zeros((3, 3))
        v[0, 1] = v[1, 0] = 0.7
        top = top_n_moments(ScoreMap2D(VideoGrid(3), v), 2)
        assert [m for m, _ in top] == [MomentInterval(0, 2), MomentInterval(1, 2)]

    def test_tie_prefers_shorter(self):
        v = np.zeros((3, 3))
        v[0, 2] = v[0, 0] = 0.7
        top = top_n_moments(ScoreMap2D(VideoGrid(3), v), 1)
        assert top[0][0] == MomentInterval(0, 1)

    def test_clamps_to_covered(self):
        covered = np.zeros((4, 4), bool)
        covered[0, 0] = covered[1, 1] = True
        top = top_n_moments(ScoreMap2D(VideoGrid(4), np.ones((4, 4)), covered), 10)
        assert len(top) == 2

    @given(st.integers(1, 16), st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_matches_full_sort(self, n, seed):
        rng = np.random.default_rng(seed)
        # coarse values force plenty of ties
        v = rng.integers(0, 4, size=(n, n)) / 4
        grid = VideoGrid(n)
        sm = ScoreMap2D(grid, v)
        cells = [(i, j) for i in range(n) for j in range(n - i)]
        ref = sorted(cells, key=lambda c: (-v[c], c[0], c[1]))
        got = top_n_moments(sm, len(cells))
        assert [m for m, _ in got] == [grid.moment(*c) for c in ref]
        copy = ScoreMap2D(grid, v.copy())
        assert top_n_moments(copy, len(cells)) == got

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            top_n_moments(ScoreMap2D(VideoGrid(2), np.zeros((2, 2))), 0)


def test_json_round_trip():
    covered = valid_mask(4).copy()
    covered[0, 3] = False
    sm = ScoreMap2D(VideoGrid(4, 2.5), np.arange(16.0).reshape(4, 4) / 16, covered)
    back = ScoreMap2D.from_json(sm.to_json())
    np.testing.assert_array_equal(back.values, sm.values)
    np.testing.assert_array_equal(back.covered, sm.covered)
    assert back.grid == sm.grid
    obj = json.loads(sm.to_json())
    assert set(obj) == {"n", "tau", "values", "covered"}
    assert len(obj["values"]) == 16


@pytest.mark.parametrize("text", ["{", '{"n": 2}', '{"n": 2, "tau": 1, "values": [1, 2, 3]}'])
def test_json_malformed(text):
    with pytest.raises(ValueError):
        ScoreMap2D.from_json(text)
