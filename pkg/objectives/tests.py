import numpy as np
import pytest
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, LossError
from objectives.gradcheck import check_inputs, run_gradcheck
from objectives.losses import (
    LossConfig,
    LossWeights,
    info_nce,
    loss_cdp,
    loss_p2s,
    loss_tmp,
    loss_vfm,
    total_loss,
)
from objectives.pairing import build_pairing, majority_classes, pair_by_class, pair_by_nearest


IDENTITY_LOSS = float(np.log1p(np.exp(-1.0)))


def unit_rows(seed, rows, dim):
    values = np.random.default_rng(seed).normal(size=(rows, dim))
    return values / np.linalg.norm(values, axis=1, keepdims=True)


class InfoNceTests(SimpleTestCase):

    def test_single_pair_is_zero(self):
        result = info_nce(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]))
        self.assertEqual(result.value, 0.0)
        np.testing.assert_array_equal(result.grad_anchor, 0.0)

    def test_identity_pairs(self):
        result = info_nce(np.eye(2), np.eye(2), temperature=1.0)
        self.assertAlmostEqual(result.value, 0.31326, delta=1e-5)
        self.assertAlmostEqual(result.value, IDENTITY_LOSS, places=12)

    def test_aligned_rows_at_low_temperature(self):
        result = info_nce(np.eye(4), np.eye(4), temperature=0.07)
        expected = 3.0 * np.exp(-1.0 / 0.07)
        self.assertGreater(result.value, 0.0)
        self.assertAlmostEqual(result.value / expected, 1.0, places=4)

    def test_permuting_pairs_keeps_value(self):
        anchors, targets = unit_rows(0, 6, 4), unit_rows(1, 6, 4)
        order = np.random.default_rng(2).permutation(6)
        self.assertAlmostEqual(info_nce(anchors, targets).value,
                               info_nce(anchors[order], targets[order]).value, places=12)

    def test_gradients_match_finite_differences(self):
        anchors, targets = unit_rows(3, 5, 3), unit_rows(4, 5, 3)
        result = info_nce(anchors, targets, 0.5)
        error = check_inputs(lambda a, t: info_nce(a, t, 0.5).value, [anchors, targets],
                             [result.grad_anchor, result.grad_target])
        self.assertLessEqual(error, 1e-4)

    def test_empty_batch(self):
        with self.assertRaises(LossError) as ctx:
            info_nce(np.zeros((0, 3)), np.zeros((0, 3)))
        self.assertEqual(ctx.exception.code, LossError.EMPTY_BATCH)

    def test_row_mismatch(self):
        with self.assertRaises(LossError) as ctx:
            info_nce(np.eye(3), np.eye(2))
        self.assertEqual(ctx.exception.code, LossError.ROW_MISMATCH)

    def test_vfm_contrasts_keys_against_queries(self):
        queries, keys = unit_rows(5, 4, 3), unit_rows(6, 4, 3)
        result = loss_vfm(queries, keys, 0.2)
        self.assertEqual(result.value, info_nce(keys, queries, 0.2).value)


class TemporalLossTests(SimpleTestCase):

    def test_identical_frames_two_segments(self):
        features = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        segments = np.array([1, 1, 2])
        result = loss_tmp(features, features.copy(), segments, segments, temperature=1.0)
        self.assertAlmostEqual(result.value, 0.62652, delta=1e-5)
        self.assertEqual(result.details['shared_segments'], 2)

    def test_one_shared_segment_is_zero(self):
        result = loss_tmp(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.5, 0.5]]),
                          np.array([1, 2]), np.array([2]))
        self.assertEqual(result.value, 0.0)

    def test_unmatched_segments_get_no_gradient(self):
        rng = np.random.default_rng(7)
        features_t, features_t1 = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        result = loss_tmp(features_t, features_t1, np.array([1, 1, 2, 2, 3, 0]), np.array([1, 2, 2, 4, 4]), 0.5)
        np.testing.assert_array_equal(result.grad_anchor[4:], 0.0)
        np.testing.assert_array_equal(result.grad_target[3:], 0.0)

    def test_no_overlap(self):
        with self.assertRaises(LossError) as ctx:
            loss_tmp(np.eye(2), np.eye(2), np.array([1, 2]), np.array([3, 0]))
        self.assertEqual(ctx.exception.code, LossError.NO_TEMPORAL_OVERLAP)


class PointToSegmentTests(SimpleTestCase):

    def test_single_segment_is_zero(self):
        result = loss_p2s(np.random.default_rng(0).normal(size=(5, 3)), np.ones(5, dtype=np.int64))
        self.assertEqual(result.value, 0.0)

    def test_two_orthonormal_points(self):
        result = loss_p2s(np.eye(2), np.array([1, 2]), temperature=1.0)
        self.assertAlmostEqual(result.value, 0.31326, delta=1e-5)
        literal = loss_p2s(np.eye(2), np.array([1, 2]), temperature=1.0, mode='literal')
        self.assertAlmostEqual(literal.value, result.value, places=12)

    def test_noise_points_get_no_gradient(self):
        features = np.random.default_rng(1).normal(size=(6, 3))
        result = loss_p2s(features, np.array([1, 1, 2, 2, 0, 0]), 0.5)
        np.testing.assert_array_equal(result.grad_anchor[4:], 0.0)

    def test_gradients_match_finite_differences(self):
        features = np.array([[0.9, 0.1, -0.3], [0.2, 0.8, 0.1], [-0.5, 0.3, 0.7], [0.1, -0.6, 0.4]])
        labels = np.array([1, 1, 2, 2])
        for mode in ('transposed', 'literal'):
            result = loss_p2s(features, labels, 0.5, mode)
            error = check_inputs(lambda f: loss_p2s(f, labels, 0.5, mode).value, [features], [result.grad_anchor])
            self.assertLessEqual(error, 1e-4)

    def test_no_segment_points(self):
        with self.assertRaises(LossError) as ctx:
            loss_p2s(np.eye(3), np.zeros(3, dtype=np.int64))
        self.assertEqual(ctx.exception.code, LossError.NO_SEGMENT_POINTS)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            loss_p2s(np.eye(2), np.array([1, 2]), mode='sampled')


class CrossSourceTests(SimpleTestCase):

    def test_single_pair_is_zero(self):
        result = loss_cdp(unit_rows(0, 3, 2), unit_rows(1, 2, 2), [(2, 0)])
        self.assertEqual(result.value, 0.0)

    def test_three_one_hot_classes(self):
        result = loss_cdp(np.eye(3), np.eye(3), [(0, 0), (1, 1), (2, 2)], temperature=1.0)
        self.assertAlmostEqual(result.details['forward'], 0.55145, delta=1e-5)
        self.assertAlmostEqual(result.details['backward'], 0.55145, delta=1e-5)
        self.assertAlmostEqual(result.value, 0.55145, delta=1e-5)

    def test_unpaired_rows_get_no_gradient(self):
        keys_m, keys_n = unit_rows(2, 4, 3), unit_rows(3, 3, 3)
        result = loss_cdp(keys_m, keys_n, [(0, 2), (3, 0)], 0.5)
        np.testing.assert_array_equal(result.grad_anchor[[1, 2]], 0.0)
        np.testing.assert_array_equal(result.grad_target[1], 0.0)

    def test_no_pairs(self):
        with self.assertRaises(LossError) as ctx:
            loss_cdp(np.eye(2), np.eye(2), [])
        self.assertEqual(ctx.exception.code, LossError.NO_CROSS_SOURCE_PAIRS)


class TotalLossTests(SimpleTestCase):

    def setUp(self):
        self.queries, self.keys = unit_rows(10, 4, 3), unit_rows(11, 4, 3)
        self.features = np.array([[1.0, 0.2, 0.0], [0.1, 0.9, 0.3], [-0.4, 0.2, 0.8], [0.5, -0.7, 0.1]])
        self.segments = np.array([1, 1, 2, 2])
        self.parts = {
            'vfm': loss_vfm(self.queries, self.keys),
            'tmp': loss_tmp(self.features, self.features[::-1].copy(), self.segments, self.segments),
            'p2s': loss_p2s(self.features, self.segments),
            'cdp': loss_cdp(self.keys, unit_rows(12, 3, 3), [(0, 1), (2, 2)]),
        }

    def test_zero_weights(self):
        config = LossConfig(weights=LossWeights(0.0, 0.0, 0.0, 0.0))
        composite = total_loss(self.parts, config)
        self.assertEqual(composite.value, 0.0)
        for name in self.parts:
            grad_anchor, _ = composite.weighted_gradients(name)
            np.testing.assert_array_equal(grad_anchor, 0.0)

    def test_vfm_only(self):
        composite = total_loss(self.parts, LossConfig(weights=LossWeights(1.0, 0.0, 0.0, 0.0)))
        self.assertEqual(composite.value, self.parts['vfm'].value)
        self.assertEqual(composite.component('tmp'), self.parts['tmp'].value)

    def test_unit_weights_sum_terms(self):
        composite = total_loss(self.parts)
        self.assertAlmostEqual(composite.value, sum(part.value for part in self.parts.values()), delta=1e-9)

    def test_missing_terms_are_skipped(self):
        composite = total_loss({'vfm': self.parts['vfm'], 'cdp': None})
        self.assertNotIn('cdp', composite.terms)
        self.assertEqual(composite.component('cdp'), 0.0)

    def test_baseline_swaps_vfm_for_slic(self):
        config = LossConfig(weights=LossWeights(vfm=0.5), baseline_slic=True)
        self.assertEqual(config.weight('slic'), 0.5)
        self.assertEqual(config.weight('vfm'), 0.0)
        self.assertEqual(LossConfig().weight('slic'), 0.0)

    def test_config_is_validated(self):
        with self.assertRaises(ConfigurationError):
            LossConfig(temperature=0.0)
        with self.assertRaises(ConfigurationError):
            LossConfig(p2s_mode='sampled')
        with self.assertRaises(ConfigurationError):
            LossWeights(vfm=-1.0)


class LossInvariantTests(SimpleTestCase):

    def random_terms(self, seed, temperature):
        rng = np.random.default_rng(seed)
        features, following = unit_rows(seed, 8, 5), unit_rows(seed + 100, 7, 5)
        segments_t = np.array([1, 1, 2, 2, 3, 3, 0, 4])
        segments_t1 = rng.permutation([1, 2, 2, 3, 4, 4, 0])
        return {
            'info_nce': info_nce(features[:6], following[:6], temperature),
            'vfm': loss_vfm(features[:6], following[:6], temperature),
            'tmp': loss_tmp(features, following, segments_t, segments_t1, temperature),
            'p2s': loss_p2s(features, segments_t, temperature),
            'p2s_literal': loss_p2s(features, segments_t, temperature, 'literal', seed=seed),
            'cdp': loss_cdp(features, following, [(0, 1), (2, 3), (4, 0), (7, 6)], temperature),
        }

    def test_lower_temperature_lowers_loss_on_aligned_rows(self):
        keys = np.eye(4)
        for loss in (
            lambda t: info_nce(keys, keys, t),
            lambda t: loss_tmp(keys, keys, np.arange(1, 5), np.arange(1, 5), t),
            lambda t: loss_cdp(keys, keys, [(i, i) for i in range(4)], t),
        ):
            values = [loss(t).value for t in (1.0, 0.5, 0.07)]
            self.assertGreater(values[0], values[1])
            self.assertGreater(values[1], values[2])
            self.assertGreater(values[2], 0.0)

    def test_tiny_temperature_stays_finite(self):
        for seed in range(3):
            with np.errstate(over='raise', invalid='raise', divide='raise'):
                terms = self.random_terms(seed, 1e-3)
            for name, result in terms.items():
                self.assertTrue(np.isfinite(result.value), name)
                self.assertTrue(np.all(np.isfinite(result.grad_anchor)), name)
                if result.grad_target is not None:
                    self.assertTrue(np.all(np.isfinite(result.grad_target)), name)

    def test_losses_are_non_negative(self):
        for seed in range(5):
            for temperature in (1.0, 0.5, 0.07):
                for name, result in self.random_terms(seed, temperature).items():
                    self.assertGreaterEqual(result.value, 0.0, (name, seed, temperature))

    def test_shuffled_cross_source_pairs_cost_more(self):
        rng = np.random.default_rng(8)
        directions = unit_rows(20, 4, 6)
        classes_m, classes_n = np.array([0, 1, 2, 3]), np.array([2, 0, 3, 1])
        keys_m = directions[classes_m] + 0.05 * rng.normal(size=(4, 6))
        keys_n = directions[classes_n] + 0.05 * rng.normal(size=(4, 6))
        keys_m /= np.linalg.norm(keys_m, axis=1, keepdims=True)
        keys_n /= np.linalg.norm(keys_n, axis=1, keepdims=True)

        matched = pair_by_class(classes_m, classes_n).pairs()
        self.assertEqual(len(matched), 4)
        rows_n = [n for _, n in matched]
        shuffled = [(m, n) for (m, _), n in zip(matched, rows_n[1:] + rows_n[:1])]
        for temperature in (1.0, 0.5, 0.07):
            self.assertGreater(loss_cdp(keys_m, keys_n, shuffled, temperature).value,
                               loss_cdp(keys_m, keys_n, matched, temperature).value)


class PairingTests(SimpleTestCase):

    def test_majority_classes(self):
        classes = majority_classes([np.array([0, 1, 2]), np.array([3, 4])], np.array([1, 1, 2, 2, 1]))
        np.testing.assert_array_equal(classes, [1, 1])

    def test_first_row_per_shared_class(self):
        pairing = pair_by_class([1, 2, 3, 1], [3, 1, 5])
        self.assertEqual(pairing.pairs(), [(0, 1), (2, 0)])
        self.assertEqual(pairing.method, 'class')

    def test_mutual_nearest_neighbours(self):
        keys = np.eye(3)
        pairing = pair_by_nearest(keys, keys[[2, 0, 1]])
        self.assertEqual(pairing.pairs(), [(0, 1), (1, 2), (2, 0)])

    def test_fallback_without_shared_classes(self):
        keys = np.eye(2)
        pairing = build_pairing(keys, keys, [1, 2], [3, 4])
        self.assertEqual(pairing.method, 'nearest')
        self.assertEqual(len(pairing), 2)

    def test_empty_side(self):
        self.assertEqual(len(pair_by_nearest(np.zeros((0, 2)), np.eye(2))), 0)


class GradcheckTests(SimpleTestCase):

    def test_small_suite_passes(self):
        report = run_gradcheck(seed=0, instances=2, end_to_end_instances=1)
        self.assertTrue(report.passed, report.failures())
        self.assertEqual(set(report.summary()), {
            'info_nce', 'vfm', 'slic', 'tmp', 'p2s', 'p2s_literal', 'cdp', 'total', 'end_to_end',
        })

    @pytest.mark.slow
    def test_full_suite_passes(self):
        report = run_gradcheck(seed=1)
        self.assertTrue(report.passed, report.failures())
