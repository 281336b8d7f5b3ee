import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DatasetFormatError, NumericalError, PoolingError, UnknownSourceError
from embed.checkpoints import decode_checkpoint, encode_checkpoint
from embed.datatypes import EmbeddingMatrix, ImageFeatures
from embed.encoders import ImageEncoder, PointEncoder, voxel_index
from embed.heads import PointHead, bilinear_weights
from embed.normalization import (
    SourceStats,
    fit_source_stats,
    normalize_rows,
    normalize_source_features,
)
from embed.pooling import SegmentPool, pool_segment_features
from embed.services import ModelDims, PointModel, project_and_pool
from scenes.factories import PointCloudFactory
from superpixels.datatypes import SuperpixelMap, SuperpointGroups


SMALL_DIMS = ModelDims(feature_dim=2, hidden_dim=8, point_dim=8, embedding_dim=4, image_dim=6, image_stride=2)


def numeric_gradient(function, array, step=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = function()
        array[index] = original - step
        minus = function()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


class SourceNormalizationTests(SimpleTestCase):

    def test_constant_features_become_zero(self):
        cloud = PointCloudFactory(points=4, features=np.full((4, 2), 0.25))
        normalized = normalize_source_features(cloud, fit_source_stats([cloud]))
        np.testing.assert_array_equal(normalized.features, 0.0)
        np.testing.assert_array_equal(normalized.coords, cloud.coords)

    def test_two_point_channel(self):
        cloud = PointCloudFactory(points=2, features=np.array([[0.0, 5.0], [255.0, 5.0]]))
        normalized = normalize_source_features(cloud, fit_source_stats([cloud]))
        np.testing.assert_allclose(normalized.features[:, 0], [-1.0, 1.0])
        np.testing.assert_array_equal(normalized.features[:, 1], [0.0, 0.0])

    def test_stats_are_per_source(self):
        a = PointCloudFactory(points=10, source_id=1)
        b = PointCloudFactory(points=10, source_id=2, features=np.full((10, 2), 7.0))
        stats = fit_source_stats([a, b])
        self.assertEqual(stats.for_source(2).mean, (7.0, 7.0))
        self.assertIn(1, stats)
        self.assertEqual(SourceStats.from_dict(stats.to_dict()), stats)

    def test_pooled_frames_are_standardized(self):
        rng = np.random.default_rng(4)
        clouds = [
            PointCloudFactory(points=60, features=rng.normal([120.0, -1.5], [40.0, 0.8], size=(60, 2))),
            PointCloudFactory(points=45, features=rng.normal([90.0, 0.5], [25.0, 1.2], size=(45, 2))),
            PointCloudFactory(points=30, features=rng.uniform([0.0, -2.0], [255.0, 3.0], size=(30, 2))),
        ]
        stats = fit_source_stats(clouds)
        pooled = np.concatenate([normalize_source_features(cloud, stats).features for cloud in clouds])
        np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(pooled.var(axis=0), 1.0, atol=1e-6)

    def test_unknown_source(self):
        stats = fit_source_stats([PointCloudFactory(source_id=1)])
        with self.assertRaises(UnknownSourceError):
            normalize_source_features(PointCloudFactory(source_id=9), stats)

    def test_zero_row_is_rejected(self):
        with self.assertRaises(PoolingError):
            normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))
        rows, _ = normalize_rows(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(rows, [[0.6, 0.8]])

    def test_embedding_matrix_checks_norms(self):
        with self.assertRaises(NumericalError):
            EmbeddingMatrix(np.array([[1.0, 1.0]]))
        self.assertEqual(EmbeddingMatrix(np.array([[1.0, 1.0]]), normalized=False).rows, 1)


class PoolingTests(SimpleTestCase):

    def test_mean_of_identical_rows(self):
        pooled = pool_segment_features(np.array([[3.0, 4.0], [3.0, 4.0]]), np.array([1, 1]))
        np.testing.assert_allclose(pooled.values, [[0.6, 0.8]])

    def test_max_pooling(self):
        pooled = pool_segment_features(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 1]), mode='max')
        np.testing.assert_allclose(pooled.values, [[0.7071068, 0.7071068]], atol=1e-7)

    def test_segment_without_members_is_excluded(self):
        pool = SegmentPool(np.array([1, 3, 3, 0]), segment_ids=[1, 2, 3])
        np.testing.assert_array_equal(pool.segment_ids, [1, 3])
        np.testing.assert_array_equal(pool.excluded, [2])
        pooled = pool.forward(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 3.0], [9.0, 9.0]]))
        np.testing.assert_allclose(pooled.values, [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(pooled.segment_ids, [1, 3])

    def test_zero_pooled_vector(self):
        with self.assertRaises(PoolingError) as ctx:
            pool_segment_features(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 1]))
        self.assertEqual(ctx.exception.details['segment_ids'], [1])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        labels = np.array([1, 1, 2, 2, 2, 0])
        weights = rng.normal(size=(2, 3))
        for mode in ('mean', 'max'):
            values = rng.normal(size=(6, 3))
            pool = SegmentPool(labels, mode)

            def objective():
                return float((SegmentPool(labels, mode).forward(values).values * weights).sum())

            pool.forward(values)
            analytic = pool.backward(weights)
            np.testing.assert_allclose(analytic, numeric_gradient(objective, values), atol=1e-6)


class EncoderTests(SimpleTestCase):

    def test_zero_point_head_gives_zero_outputs(self):
        head = PointHead.initialize(input_dim=5, output_dim=3)
        head.params['W'][:] = 0.0
        head.params['b'][:] = 0.0
        np.testing.assert_array_equal(head.project(np.ones((4, 5))), 0.0)

    def test_changes_stay_inside_the_neighborhood(self):
        coords = np.array([[0.01, 0.01, 0.01], [0.05, 0.02, 0.03], [1.0, 1.0, 1.0], [2.0, 0.0, 0.0]])
        features = np.random.default_rng(1).normal(size=(4, 2))
        encoder = PointEncoder.initialize(feature_dim=2, hidden_dim=16, output_dim=8, seed=3)
        before = encoder.forward(coords, features)[0]
        features[0, 1] += 1.0
        after = encoder.forward(coords, features)[0]
        changed = np.any(np.abs(after - before) > 1e-12, axis=1)
        inverse = encoder.voxels(coords)[0]
        np.testing.assert_array_equal(changed, inverse == inverse[0])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        coords = rng.uniform(0.0, 0.3, size=(12, 3))
        features = rng.normal(size=(12, 2))
        weights = rng.normal(size=(12, 4))
        encoder = PointEncoder.initialize(feature_dim=2, hidden_dim=6, output_dim=4, seed=4, context_block=1)

        def objective():
            return float((encoder.forward(coords, features)[0] * weights).sum())

        _, cache = encoder.forward(coords, features)
        grads = encoder.backward(cache, weights)
        for name in PointEncoder.PARAMETER_NAMES:
            np.testing.assert_allclose(grads[name], numeric_gradient(objective, encoder.params[name]), atol=1e-5)

    def test_translation_by_whole_neighborhoods(self):
        coords = np.array([[0.25, 0.35, 0.15], [0.55, 0.45, 0.65], [1.45, 0.25, 0.35], [1.65, 0.75, 0.55]])
        features = np.random.default_rng(6).normal(size=(4, 2))
        encoder = PointEncoder.initialize(feature_dim=2, hidden_dim=16, output_dim=8, seed=7)
        shifted = coords + np.array([3.0, -2.0, 1.0])
        np.testing.assert_allclose(encoder.forward(shifted, features)[0], encoder.forward(coords, features)[0],
                                   atol=1e-9)

    def test_neighborhood_id_groups_blocks_of_voxels(self):
        coords = np.array([[0.05, 0.05, 0.05], [0.95, 0.45, 0.15], [1.05, 0.05, 0.05]])
        inverse, _, counts = voxel_index(coords, voxel_size=0.1, block=10)
        self.assertEqual(inverse[0], inverse[1])
        self.assertNotEqual(inverse[0], inverse[2])
        np.testing.assert_array_equal(counts, [2.0, 1.0])
        self.assertEqual(len(np.unique(voxel_index(coords, voxel_size=0.1)[0])), 3)

    def test_second_layer_reads_point_and_context(self):
        encoder = PointEncoder.initialize(feature_dim=2, hidden_dim=16, output_dim=8, seed=3)
        self.assertEqual(encoder.params['W2'].shape, (32, 8))
        self.assertAlmostEqual(encoder.context_size, 1.0)

    def test_image_encoder_is_seeded(self):
        first = ImageEncoder.initialize(feature_dim=6, stride=2, seed=5)
        second = ImageEncoder.initialize(feature_dim=6, stride=2, seed=5)
        rgb = np.random.default_rng(0).uniform(size=(7, 9, 3))
        features = first.encode(rgb)
        np.testing.assert_array_equal(features.grid, second.encode(rgb).grid)
        self.assertEqual(features.grid.shape, (4, 5, 6))
        with self.assertRaises(ValueError):
            first.projection[0, 0] = 1.0

    def test_bilinear_weights_hit_nodes(self):
        weights = bilinear_weights(7, 2, 4)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)
        np.testing.assert_allclose(weights[[0, 2, 4, 6]], np.eye(4))
        np.testing.assert_allclose(weights[1], [0.5, 0.5, 0.0, 0.0])


class ProjectAndPoolTests(SimpleTestCase):

    def test_uniform_image_segment(self):
        model = PointModel.initialize(seed=1, dims=SMALL_DIMS)
        grid = np.tile(np.linspace(0.1, 0.6, 6), (3, 4, 1))
        image = ImageFeatures(grid=grid, stride=2, height=6, width=8)
        labels = np.ones((6, 8), dtype=np.int64)
        superpixel_map = SuperpixelMap(labels=labels, segment_count=1)
        groups = SuperpointGroups(groups={1: np.arange(5)}, uncovered_points=np.zeros(0, dtype=np.int64),
                                  empty_segments=[], point_count=5)
        features = np.random.default_rng(0).normal(size=(5, SMALL_DIMS.point_dim))

        queries, keys, _ = project_and_pool(features, image, model.heads, groups, superpixel_map)
        v = grid[0, 0] @ model.heads.image.params['W'] + model.heads.image.params['b']
        np.testing.assert_allclose(queries.values[0], v / np.linalg.norm(v))
        self.assertEqual(queries.rows, keys.rows)
        np.testing.assert_allclose(np.linalg.norm(keys.values, axis=1), 1.0)

    def test_rows_follow_segments_with_points(self):
        model = PointModel.initialize(seed=2, dims=SMALL_DIMS)
        image = ImageFeatures(grid=np.random.default_rng(1).normal(size=(3, 4, 6)), stride=2, height=6, width=8)
        labels = np.repeat(np.array([1, 2, 3, 4]), 12).reshape(6, 8)
        groups = SuperpointGroups(groups={1: np.array([0, 1]), 4: np.array([2])},
                                  uncovered_points=np.array([3]), empty_segments=[2, 3], point_count=4)
        features = np.random.default_rng(2).normal(size=(4, SMALL_DIMS.point_dim))
        queries, keys, _ = project_and_pool(features, image, model.heads, groups,
                                            SuperpixelMap(labels=labels, segment_count=4))
        np.testing.assert_array_equal(queries.segment_ids, [1, 4])
        np.testing.assert_array_equal(keys.segment_ids, [1, 4])


class CheckpointTests(SimpleTestCase):

    def test_round_trip(self):
        stats = fit_source_stats([PointCloudFactory(points=10, source_id=1)])
        model = PointModel.initialize(seed=7, dims=SMALL_DIMS, stats=stats)
        loaded, extra = decode_checkpoint(encode_checkpoint(model, extra={'step': 3}))
        self.assertEqual(extra, {'step': 3})
        self.assertEqual(loaded.dims, SMALL_DIMS)
        self.assertEqual(loaded.stats, stats)
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name], value.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(loaded.image_encoder.projection, model.image_encoder.projection)

    def test_bad_magic(self):
        data = encode_checkpoint(PointModel.initialize(dims=SMALL_DIMS))
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_checkpoint(b'LADXX1\0\0' + data[8:])
        self.assertEqual(ctx.exception.code, DatasetFormatError.BAD_MAGIC)

    def test_truncated(self):
        data = encode_checkpoint(PointModel.initialize(dims=SMALL_DIMS))
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_checkpoint(data[:-4])
        self.assertEqual(ctx.exception.code, DatasetFormatError.TRUNCATED)
