"""Tests for the feature pyramid, perceptual and squared-L2 distances."""

import numpy as np
import pytest

from cimle_core import Rng, ShapeError
from distance import (
    CalibrationError,
    FeatureExtractor,
    LayerWeights,
    PerceptualDistance,
    SquaredL2Distance,
    calibrate_lambda,
    downsample_mask,
    held_out_metric,
    l2_distance,
    lambda_from_layer_means,
    layer_differences,
    make_distance,
    perceptual_distance,
)
from gradcheck import max_relative_error, numeric_partials


@pytest.fixture
def small_extractor():
    return FeatureExtractor(seed=11, height=4, width=6, channels=3, widths=(3, 4, 4))


@pytest.fixture
def unit_weights():
    return LayerWeights(np.ones(3))


class TestFeatureExtractor:
    """Frozen random filter pyramid."""

    def test_layer_shapes_default_pyramid(self):
        fe = FeatureExtractor(seed=0, height=16, width=32)
        assert fe.layer_shapes() == [
            (16, 32, 8), (8, 16, 16), (4, 8, 16), (2, 4, 32), (1, 2, 32),
        ]

    def test_same_seed_same_filters(self):
        a = FeatureExtractor(seed=5, height=4, width=4)
        b = FeatureExtractor(seed=5, height=4, width=4)
        c = FeatureExtractor(seed=6, height=4, width=4)
        for fa, fb in zip(a.filters, b.filters):
            assert fa.tobytes() == fb.tobytes()
        assert not np.array_equal(a.filters[0], c.filters[0])

    def test_filters_are_read_only(self, small_extractor):
        with pytest.raises(ValueError):
            small_extractor.filters[0][0, 0, 0, 0] = 1.0

    def test_extract_shapes(self, small_extractor, rng):
        features = small_extractor.extract(rng.uniform(size=(4, 6, 3)))
        assert [f.shape for f in features] == small_extractor.layer_shapes()

    def test_wrong_image_shape(self, small_extractor):
        with pytest.raises(ShapeError):
            small_extractor.extract(np.zeros((4, 4, 3)))


class TestPerceptualDistance:
    """Weighted multi-layer L1 feature distance."""

    def test_identical_images_are_zero(self, small_extractor, unit_weights, rng):
        y = rng.uniform(size=(4, 6, 3))
        assert perceptual_distance(small_extractor, unit_weights, y, y) == 0.0

    def test_symmetric_and_positive(self, small_extractor, unit_weights, rng):
        dist = PerceptualDistance(small_extractor, unit_weights)
        a = rng.uniform(size=(4, 6, 3))
        b = rng.child("b").uniform(size=(4, 6, 3))
        assert dist(a, b) > 0.0
        assert dist(a, b) == pytest.approx(dist(b, a), rel=1e-12)

    def test_equals_weighted_layer_differences(self, small_extractor, rng):
        weights = LayerWeights(np.array([0.5, 2.0, 3.0]))
        a = rng.uniform(size=(4, 6, 3))
        b = rng.child("b").uniform(size=(4, 6, 3))
        expected = np.dot(weights.values, layer_differences(small_extractor, a, b))
        assert perceptual_distance(small_extractor, weights, a, b) == pytest.approx(expected, rel=1e-12)

    def test_weight_count_must_match_layers(self, small_extractor):
        with pytest.raises(ShapeError):
            PerceptualDistance(small_extractor, LayerWeights(np.ones(2)))

    def test_ones_mask_matches_no_mask(self, small_extractor, unit_weights, rng):
        dist = PerceptualDistance(small_extractor, unit_weights)
        a = rng.uniform(size=(4, 6, 3))
        b = rng.child("b").uniform(size=(4, 6, 3))
        assert dist(a, b, np.ones((4, 6))) == pytest.approx(dist(a, b), rel=1e-12)

    def test_constant_mask_scales_distance(self, small_extractor, unit_weights, rng):
        dist = PerceptualDistance(small_extractor, unit_weights)
        a = rng.uniform(size=(4, 6, 3))
        b = rng.child("b").uniform(size=(4, 6, 3))
        assert dist(a, b, np.full((4, 6), 0.25)) == pytest.approx(0.25 * dist(a, b), rel=1e-12)

    @pytest.mark.parametrize("bad", [0.0, 1.5, -0.1])
    def test_mask_entries_outside_unit_interval(self, small_extractor, unit_weights, bad):
        mask = np.ones((4, 6))
        mask[1, 1] = bad
        with pytest.raises(ValueError):
            PerceptualDistance(small_extractor, unit_weights)(np.zeros((4, 6, 3)), np.ones((4, 6, 3)), mask)

    def test_non_finite_image_rejected(self, small_extractor, unit_weights):
        bad = np.zeros((4, 6, 3))
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            PerceptualDistance(small_extractor, unit_weights)(np.zeros((4, 6, 3)), bad)

    def test_batch_matches_single_calls(self, small_extractor, unit_weights, rng):
        dist = PerceptualDistance(small_extractor, unit_weights)
        y = rng.uniform(size=(4, 6, 3))
        candidates = rng.child("c").uniform(size=(5, 4, 6, 3))
        batched = dist.batch(y, candidates)
        singles = [dist(y, c) for c in candidates]
        np.testing.assert_allclose(batched, singles, rtol=1e-12)

    def test_gradient_matches_finite_differences(self, small_extractor, rng):
        dist = PerceptualDistance(small_extractor, LayerWeights(np.array([1.0, 0.5, 0.25])))
        for trial in range(10):
            stream = rng.child("trial", trial)
            y = stream.child("y").uniform(size=(4, 6, 3))
            y_hat = stream.child("y_hat").uniform(size=(4, 6, 3))
            mask = stream.child("mask").uniform(0.1, 1.0, size=(4, 6))
            target = small_extractor.extract_batch(y[None])

            def loss(vector):
                return dist(y, vector.reshape(y.shape), mask)

            def pattern(vector):
                features, (_, preacts) = small_extractor.extract_batch(
                    vector.reshape((1,) + y.shape), keep_trace=True
                )
                signs = [(a > 0).ravel() for a in preacts]
                signs += [np.sign(f - t).ravel() for f, t in zip(features, target)]
                return np.concatenate(signs)

            analytic = dist.gradient(y, y_hat, mask).ravel()
            coords = np.arange(y_hat.size)
            numeric = numeric_partials(loss, pattern, y_hat.ravel(), coords)
            error, checked = max_relative_error(analytic, numeric)
            assert checked > y_hat.size // 2
            assert error < 1e-5


class TestSquaredL2Distance:
    """Sum of squared differences."""

    def test_value(self):
        a = np.zeros((2, 2, 3))
        b = np.full((2, 2, 3), 0.5)
        assert l2_distance(a, b) == pytest.approx(12 * 0.25)
        assert SquaredL2Distance()(a, b) == pytest.approx(12 * 0.25)

    def test_gradient_is_weighted_difference(self, rng):
        y = rng.uniform(size=(3, 3, 2))
        y_hat = rng.child("b").uniform(size=(3, 3, 2))
        mask = rng.child("m").uniform(0.2, 1.0, size=(3, 3))
        grad = SquaredL2Distance().gradient(y, y_hat, mask)
        np.testing.assert_allclose(grad, 2.0 * mask[..., None] * (y_hat - y))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l2_distance(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestCalibration:
    """lambda_i = 1 / mean layer difference."""

    def test_each_layer_contributes_equally(self, small_extractor, rng):
        pairs = [
            (rng.child("y", i).uniform(size=(4, 6, 3)), rng.child("g", i).uniform(size=(4, 6, 3)))
            for i in range(6)
        ]
        weights = calibrate_lambda(small_extractor, pairs)
        contributions = np.mean(
            [weights.values * layer_differences(small_extractor, y, g) for y, g in pairs], axis=0
        )
        np.testing.assert_allclose(contributions, np.ones(3), rtol=1e-10)

    def test_zero_layer_mean_fails(self, small_extractor):
        y = np.full((4, 6, 3), 0.3)
        with pytest.raises(CalibrationError):
            calibrate_lambda(small_extractor, [(y, y)])

    def test_lambda_from_means(self):
        np.testing.assert_allclose(lambda_from_layer_means([2.0, 4.0]).values, [0.5, 0.25])

    def test_empty_calibration_set(self, small_extractor):
        with pytest.raises(ValueError):
            calibrate_lambda(small_extractor, [])


class TestLayerWeights:
    """Strictly positive per-layer weights."""

    def test_non_positive_rejected(self):
        with pytest.raises(ValueError):
            LayerWeights(np.array([1.0, 0.0]))

    def test_text_round_trip(self):
        weights = LayerWeights(np.array([0.1, 1.0 / 3.0]))
        assert LayerWeights.from_text(weights.to_text()).values.tobytes() == weights.values.tobytes()


class TestMaskDownsampling:
    """Area averaging to every feature resolution."""

    def test_shapes_and_mean_preserved(self, rng):
        mask = rng.uniform(0.1, 1.0, size=(1, 8, 8))
        levels = downsample_mask(mask, 4)
        assert [level.shape for level in levels] == [(1, 8, 8, 1), (1, 4, 4, 1), (1, 2, 2, 1), (1, 1, 1, 1)]
        assert levels[-1][0, 0, 0, 0] == pytest.approx(mask.mean(), rel=1e-12)


class TestHeldOutMetric:
    """Evaluation-only perceptual metric."""

    def test_size_normalized_weights(self):
        metric = held_out_metric(99, 16, 32)
        sizes = [h * w * c for h, w, c in metric.extractor.layer_shapes()]
        np.testing.assert_allclose(metric.weights.values, 1.0 / np.array(sizes))

    def test_independent_from_training_filters(self):
        training = FeatureExtractor(seed=1, height=4, width=4)
        metric = held_out_metric(2, 4, 4)
        assert not np.array_equal(training.filters[0], metric.extractor.filters[0])


class TestMakeDistance:
    """Distance factory."""

    def test_l2(self):
        assert make_distance("l2").name == "l2"

    def test_perceptual_needs_weights(self, small_extractor):
        with pytest.raises(ValueError):
            make_distance("perceptual", small_extractor)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_distance("cosine")


def test_distance_seed_is_reproducible():
    a = Rng(3).uniform(size=(4, 4, 3))
    b = Rng(4).uniform(size=(4, 4, 3))
    first = held_out_metric(7, 4, 4)(a, b)
    second = held_out_metric(7, 4, 4)(a, b)
    assert first == second
