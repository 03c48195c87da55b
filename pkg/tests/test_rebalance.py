"""Tests for rarity scores, rebalanced batch sampling and loss masks."""

import logging

import numpy as np
import pytest

from cimle_core import PairedDataset, Rng, ShapeError, one_hot_encode
from rebalance import (
    MIN_BANDWIDTH,
    RarityTable,
    average_color,
    fit_kde,
    portion_sizes,
    rarity_mask,
    rarity_masks,
    rarity_scores,
    sample_batch,
    scott_bandwidth,
)


RED = (0.9, 0.1, 0.1)
BLUE = (0.1, 0.1, 0.9)
GREY = (0.5, 0.5, 0.5)


def two_class_dataset(colors):
    """Left half class 0 painted with colors[k], right half class 1 always grey."""
    n = len(colors)
    labels = np.zeros((n, 2, 4), dtype=np.uint8)
    labels[:, :, 2:] = 1
    images = np.zeros((n, 2, 4, 3))
    for k, color in enumerate(colors):
        images[k, :, :2] = color
        images[k, :, 2:] = GREY
    return PairedDataset("layout", labels, images, num_classes=2)


def hand_table(scores, area=None):
    scores = np.asarray(scores, dtype=np.float64)
    n, classes = scores.shape
    return RarityTable(
        colors=np.zeros((n, classes, 3)),
        present=scores > 0,
        densities=np.where(scores > 0, 1.0, np.nan),
        scores=scores,
        area=np.ones(classes) if area is None else np.asarray(area, dtype=np.float64),
        bandwidths=np.ones(classes),
    )


class TestAverageColor:
    """c_k(p)."""

    def test_mean_over_class_pixels(self):
        layout = one_hot_encode(np.array([[0, 0, 1]]), 2)
        image = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]]])
        np.testing.assert_allclose(average_color(layout, image, 0), [0.5, 0.0, 0.5])
        np.testing.assert_allclose(average_color(layout, image, 1), [0.5, 0.5, 0.5])

    def test_absent_class_is_none(self):
        layout = one_hot_encode(np.array([[0, 0]]), 3)
        assert average_color(layout, np.zeros((1, 2, 3)), 2) is None

    def test_shape_mismatch(self):
        layout = one_hot_encode(np.array([[0, 0]]), 2)
        with pytest.raises(ShapeError):
            average_color(layout, np.zeros((1, 3, 3)), 0)


class TestKde:
    """Isotropic Gaussian kernel density."""

    def test_single_centre_peak(self):
        h = 0.2
        kde = fit_kde(np.array([[0.5, 0.5, 0.5]]), h)
        expected = (2 * np.pi * h ** 2) ** -1.5
        assert kde.density(np.array([0.5, 0.5, 0.5])) == pytest.approx(expected, rel=1e-10)

    def test_two_centres_closed_form(self):
        h = 0.3
        centres = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        kde = fit_kde(centres, h)
        query = np.array([0.25, 0.0, 0.0])
        norm = (2 * np.pi * h ** 2) ** -1.5
        expected = 0.5 * norm * (np.exp(-0.25 ** 2 / (2 * h ** 2)) + np.exp(-0.75 ** 2 / (2 * h ** 2)))
        assert kde.density(query) == pytest.approx(expected, rel=1e-10)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            fit_kde(np.zeros((0, 3)), 0.1)
        with pytest.raises(ValueError):
            fit_kde(np.zeros((2, 3)), 0.0)

    def test_scott_bandwidth(self):
        assert scott_bandwidth(np.array([[0.2, 0.2, 0.2]])) == MIN_BANDWIDTH
        assert scott_bandwidth(np.full((5, 3), 0.4)) == MIN_BANDWIDTH
        colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        expected = 2 ** (-1.0 / 7) * np.std([0.0, 1.0], ddof=1)
        assert scott_bandwidth(colors) == pytest.approx(expected)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(11)
        centres = rng.uniform(0.2, 0.8, size=(30, 3))
        queries = rng.uniform(0.0, 1.0, size=(100, 3))
        h = 0.15
        kde = fit_kde(centres, h)
        sq = ((queries[:, None, :] - centres[None, :, :]) ** 2).sum(axis=-1)
        direct = np.exp(-sq / (2 * h ** 2)).mean(axis=1) * (2 * np.pi * h ** 2) ** -1.5
        np.testing.assert_allclose(kde.density(queries), direct, rtol=1e-12, atol=0)

    def test_total_mass_is_one(self):
        rng = np.random.default_rng(12)
        kde = fit_kde(rng.uniform(0.35, 0.65, size=(20, 3)), 0.1)
        # the unit cube holds all but a negligible tail of the mass
        points = rng.uniform(0.0, 1.0, size=(200_000, 3))
        assert kde.density(points).mean() == pytest.approx(1.0, abs=0.02)


class TestRarityScores:
    """R_p(k) = 1 / D_p(c_k(p))."""

    def test_rare_colour_scores_highest(self):
        table = rarity_scores(two_class_dataset([RED] * 9 + [BLUE]))
        assert np.argmax(table.scores[:, 0]) == 9
        # a constant class gives every image the same score
        np.testing.assert_allclose(table.scores[:, 1], table.scores[0, 1])

    def test_absent_category_scores_zero(self):
        labels = np.zeros((3, 2, 2), dtype=np.uint8)
        labels[0, 0, 0] = 1
        dataset = PairedDataset("layout", labels, np.full((3, 2, 2, 3), 0.5), num_classes=3)
        table = rarity_scores(dataset)
        assert table.scores[0, 1] > 0
        np.testing.assert_array_equal(table.scores[1:, 1], 0.0)
        np.testing.assert_array_equal(table.scores[:, 2], 0.0)
        assert np.isnan(table.colors[1, 1]).all()

    def test_area_and_top_categories(self, tiny_layout_dataset):
        table = rarity_scores(tiny_layout_dataset)
        assert table.area.sum() == tiny_layout_dataset.labels.size
        top = table.top_categories
        assert 1 <= len(top) <= 5
        assert list(table.area[top]) == sorted(table.area[top], reverse=True)

    def test_to_frame_lists_present_pairs(self, tiny_layout_dataset):
        table = rarity_scores(tiny_layout_dataset)
        frame = table.to_frame()
        assert list(frame.columns) == [
            "category", "image_index", "avg_r", "avg_g", "avg_b", "density", "rarity",
        ]
        assert len(frame) == int(table.present.sum())
        np.testing.assert_allclose(frame["rarity"], 1.0 / frame["density"])

    def test_permuting_images_permutes_scores(self):
        colors = [RED, BLUE, GREY, RED, (0.2, 0.7, 0.3), RED, BLUE]
        dataset = two_class_dataset(colors)
        order = np.array([4, 0, 6, 2, 5, 1, 3])
        permuted = PairedDataset("layout", dataset.labels[order], dataset.images[order], num_classes=2)
        np.testing.assert_allclose(
            rarity_scores(permuted).scores, rarity_scores(dataset).scores[order], rtol=1e-12
        )

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            rarity_scores(
                PairedDataset("layout", np.zeros((0, 2, 2)), np.zeros((0, 2, 2, 3)), num_classes=2)
            )


class TestPortions:
    """Batch split over the top categories."""

    @pytest.mark.parametrize("batch_size,portions,expected", [
        (20, 5, [4, 4, 4, 4, 4]),
        (22, 5, [6, 4, 4, 4, 4]),
        (7, 2, [4, 3]),
        (3, 1, [3]),
    ])
    def test_sizes(self, batch_size, portions, expected):
        assert portion_sizes(batch_size, portions) == expected

    def test_batch_smaller_than_portions(self):
        with pytest.raises(ValueError):
            portion_sizes(3, 5)


class TestSampleBatch:
    """Rarity-weighted batch draws."""

    def test_deterministic_and_sized(self, tiny_layout_dataset):
        table = rarity_scores(tiny_layout_dataset)
        first = sample_batch(table, Rng(3), 10)
        again = sample_batch(table, Rng(3), 10)
        assert len(first) == 10
        np.testing.assert_array_equal(first, again)
        assert first.min() >= 0 and first.max() < len(tiny_layout_dataset)

    def test_rare_image_oversampled(self):
        table = rarity_scores(two_class_dataset([RED] * 9 + [BLUE]))
        picks = np.concatenate([sample_batch(table, Rng(0).child(t), 10) for t in range(200)])
        rare_share = np.mean(picks == 9)
        assert rare_share > 0.2

    def test_draw_frequencies_follow_scores(self):
        table = hand_table([[9.0], [1.0]])
        picks = sample_batch(table, Rng(4), 100_000)
        assert np.mean(picks == 0) == pytest.approx(0.9, abs=0.01)

    def test_equal_scores_draw_uniformly(self):
        table = hand_table(np.ones((10, 1)))
        picks = sample_batch(table, Rng(6), 100_000)
        counts = np.bincount(picks, minlength=10)
        chi_square = ((counts - 10_000) ** 2 / 10_000).sum()
        # 0.999 quantile of chi-square with 9 degrees of freedom
        assert chi_square < 27.88

    def test_only_sampled_from_images_holding_the_class(self):
        table = hand_table([[1.0, 0.0], [0.0, 2.0], [0.0, 2.0]], area=[4.0, 2.0])
        picks = sample_batch(table, Rng(1), 6)
        assert set(picks[:3]) == {0}
        assert set(picks[3:]) <= {1, 2}

    def test_scaling_one_category_keeps_batch(self):
        scores = np.array([[1.0, 0.5], [3.0, 0.5], [2.0, 4.0]])
        scaled = scores.copy()
        scaled[:, 0] *= 8.0
        a = sample_batch(hand_table(scores), Rng(5), 8)
        b = sample_batch(hand_table(scaled), Rng(5), 8)
        np.testing.assert_array_equal(a, b)

    def test_uniform_fallback_is_logged(self, caplog):
        table = hand_table(np.zeros((4, 1)))
        with caplog.at_level(logging.WARNING, logger="rebalance"):
            picks = sample_batch(table, Rng(2), 4)
        assert len(picks) == 4
        assert "uniformly" in caplog.text


class TestRarityMask:
    """Per-pixel loss masks."""

    def test_entries_in_unit_interval_with_unit_peak(self, tiny_layout_dataset):
        table = rarity_scores(tiny_layout_dataset)
        for k in range(len(tiny_layout_dataset)):
            mask = rarity_mask(tiny_layout_dataset.layout(k), table, k)
            assert mask.shape == (4, 8)
            assert mask.min() > 0.0
            assert mask.max() == 1.0

    def test_rarer_class_gets_heavier_pixels(self):
        table = hand_table([[2.0, 8.0]])
        mask = rarity_mask(np.array([[0, 1]]), table, 0)
        np.testing.assert_allclose(mask, [[0.25, 1.0]])

    def test_accepts_one_hot_arrays(self):
        table = hand_table([[2.0, 8.0]])
        onehot = one_hot_encode(np.array([[0, 1]]), 2).data
        np.testing.assert_allclose(rarity_mask(onehot, table, 0), [[0.25, 1.0]])

    def test_invariant_to_scaling_all_scores(self, tiny_layout_dataset):
        table = rarity_scores(tiny_layout_dataset)
        scaled = hand_table(table.scores * 123.0)
        indices = np.arange(len(tiny_layout_dataset))
        np.testing.assert_allclose(
            rarity_masks(table, tiny_layout_dataset.labels, indices),
            rarity_masks(scaled, tiny_layout_dataset.labels, indices),
            rtol=1e-12,
        )

    def test_all_zero_falls_back_to_ones(self, caplog):
        table = hand_table(np.zeros((1, 2)))
        with caplog.at_level(logging.WARNING, logger="rebalance"):
            mask = rarity_mask(np.array([[0, 1]]), table, 0)
        np.testing.assert_array_equal(mask, np.ones((1, 2)))
        assert "all-ones" in caplog.text

    def test_index_count_must_match(self):
        with pytest.raises(ShapeError):
            rarity_masks(hand_table([[1.0, 1.0]]), np.zeros((2, 1, 2)), [0])
