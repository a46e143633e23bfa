"""Pseudo-ground-truth heatmaps and the content loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humancrop.data import ScoredCrop
from humancrop.errors import ShapeMismatchError, ValidationError
from humancrop.geometry import Box, Size
from humancrop.heatmap import (content_loss, pseudo_heatmap, select_highly_scored,
                               softmax_weights, to_grayscale)


def crop(x1, y1, x2, y2, score):
    return ScoredCrop(box=Box(x1, y1, x2, y2), score=score)


def brute_force_heatmap(selected, image_size, map_size):
    """Per-cell accumulation oracle: loop over cells and crops explicitly."""
    scores = [c.score for c in selected]
    m = max(scores)
    exps = [math.exp(s - m) for s in scores]
    weights = [e / sum(exps) for e in exps]
    mw, mh = int(map_size.width), int(map_size.height)
    out = np.zeros((mh, mw))
    for c, w in zip(selected, weights):
        covered = False
        for i in range(mh):
            for j in range(mw):
                cx = (j + 0.5) * image_size.width / mw
                cy = (i + 0.5) * image_size.height / mh
                if c.box.x1 <= cx < c.box.x2 and c.box.y1 <= cy < c.box.y2:
                    out[i, j] += w
                    covered = True
        if not covered:
            bx, by = c.box.center
            col = min(max(int(bx / (image_size.width / mw)), 0), mw - 1)
            row = min(max(int(by / (image_size.height / mh)), 0), mh - 1)
            out[row, col] += w
    return np.clip(out, 0.0, 1.0)


class TestSelectHighlyScored:
    def test_strictly_above_threshold(self):
        crops = [crop(0, 0, 10, 10, s) for s in (1, 2, 3, 4, 5)]
        got = select_highly_scored(crops, 3.0)
        assert [c.score for c in got] == [4, 5]

    def test_all_at_threshold_falls_back_to_best(self):
        crops = [crop(0, 0, 10, 10, 3.0), crop(1, 1, 9, 9, 3.0)]
        got = select_highly_scored(crops, 3.0)
        assert got == [crops[0]]

    def test_mixed_scores(self):
        crops = [crop(0, 0, 10, 10, s) for s in (2.0, 3.5, 4.1)]
        got = select_highly_scored(crops, 3.0)
        assert [c.score for c in got] == [3.5, 4.1]

    def test_empty_raises(self):
        with pytest.raises(ValidationError):
            select_highly_scored([], 1.0)


class TestSoftmaxWeights:
    def test_uniform_for_equal_scores(self):
        for n in (1, 2, 5, 17):
            w = softmax_weights([2.5] * n)
            assert w.count == n
            assert np.allclose(w.weights, 1.0 / n, atol=1e-15)

    def test_worked_example(self):
        w = softmax_weights([0.0, math.log(3.0)])
        assert w.weights == pytest.approx([0.25, 0.75], abs=1e-12)

    def test_single_score(self):
        assert softmax_weights([7.1]).weights == pytest.approx([1.0])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
           st.floats(-100, 100))
    def test_shift_invariance(self, scores, shift):
        a = softmax_weights(scores).weights
        b = softmax_weights([s + shift for s in scores]).weights
        assert np.allclose(a, b, atol=1e-9)
        assert a.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(a > 0)


class TestPseudoHeatmap:
    def test_single_crop_is_its_binary_map(self):
        c = crop(0, 0, 32, 64, 4.0)
        grid = pseudo_heatmap([c], Size(64, 64), Size(8, 8))
        expect = np.zeros((8, 8))
        expect[:, :4] = 1.0
        assert np.array_equal(grid, expect)

    def test_two_equal_disjoint_crops(self):
        crops = [crop(0, 0, 32, 64, 3.0), crop(32, 0, 64, 64, 3.0)]
        grid = pseudo_heatmap(crops, Size(64, 64), Size(8, 8))
        assert np.all(grid == 0.5)

    def test_weighted_overlap(self):
        # weights 0.25 / 0.75 from scores {0, ln 3}; boxes overlap in the middle
        crops = [crop(0, 0, 48, 64, 0.0), crop(16, 0, 64, 64, math.log(3.0))]
        grid = pseudo_heatmap(crops, Size(64, 64), Size(8, 8))
        assert np.allclose(grid[:, :2], 0.25, atol=1e-12)
        assert np.allclose(grid[:, 2:6], 1.0, atol=1e-12)
        assert np.allclose(grid[:, 6:], 0.75, atol=1e-12)

    def test_bounded(self):
        crops = [crop(0, 0, 50, 50, float(s)) for s in range(5)]
        grid = pseudo_heatmap(crops, Size(50, 50), Size(10, 10))
        assert grid.min() >= 0.0 and grid.max() <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_matches_brute_force_oracle(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        w, h = rng.integers(20, 100, size=2)
        crops = []
        for _ in range(int(rng.integers(1, 6))):
            x = np.sort(rng.uniform(0, w, 2))
            y = np.sort(rng.uniform(0, h, 2))
            if x[1] - x[0] < 1e-3:
                x[1] = x[0] + 1e-3
            if y[1] - y[0] < 1e-3:
                y[1] = y[0] + 1e-3
            crops.append(crop(x[0], y[0], min(x[1], w), min(y[1], h),
                              float(rng.uniform(1, 5))))
        mw, mh = (int(v) for v in rng.integers(2, 16, size=2))
        got = pseudo_heatmap(crops, Size(float(w), float(h)), Size(mw, mh))
        want = brute_force_heatmap(crops, Size(float(w), float(h)), Size(mw, mh))
        assert np.allclose(got, want, atol=1e-6)


class TestContentLoss:
    def test_identical_maps(self):
        a = np.random.default_rng(0).uniform(size=(16, 16))
        assert content_loss(a, a) == 0.0

    def test_opposite_constants(self):
        assert content_loss(np.zeros((4, 4)), np.ones((4, 4))) == 1.0

    def test_constant_difference(self):
        for shape in ((3, 5), (8, 8), (1, 7)):
            got = content_loss(np.full(shape, 0.5), np.full(shape, 0.75))
            assert got == pytest.approx(0.25, abs=1e-15)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            content_loss(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(st.integers(0, 2**31 - 1))
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.uniform(size=(3, 6, 6))
        assert content_loss(a, b) == content_loss(b, a)
        assert content_loss(a, c) <= content_loss(a, b) + content_loss(b, c) + 1e-12


def test_to_grayscale_rounding():
    grid = np.array([[0.0, 0.5, 1.0], [0.251, 0.499, 0.999]])
    got = to_grayscale(grid)
    assert got.dtype == np.uint8
    assert got.tolist() == [[0, 128, 255], [64, 127, 255]]
