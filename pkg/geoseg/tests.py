import numpy as np
from django.test import SimpleTestCase
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from core.exceptions import ConfigurationError, DatasetFormatError, DegeneratePlaneError, GeometryError
from geometry.services import aggregate_frames
from geoseg.datatypes import ClusterParams, RansacParams
from geoseg.services import (
    density_cluster,
    frame_assignment,
    ransac_ground,
    segment_aggregate_and_map,
    segment_scan,
)
from geoseg.storage import decode_segment_labels, encode_segment_labels
from scenes.datatypes import PointCloud
from scenes.factories import ObjectSpecFactory, SceneSpecFactory
from scenes.services import synthesize_scene


def cloud_from(coords, timestamp=0):
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    return PointCloud(coords=coords, features=np.zeros((n, 2)), timestamp=timestamp, source_id=1,
                      gt_semantic=np.zeros(n, dtype=np.int64), gt_instance=np.zeros(n, dtype=np.int64))


def ground_grid(spacing=0.5, extent=5.0):
    axis = np.arange(-extent, extent + 1e-9, spacing)
    x, y = np.meshgrid(axis, axis)
    return np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])


def blob(center, count=20, side=0.2, seed=0):
    return np.asarray(center) + np.random.default_rng(seed).uniform(-side / 2, side / 2, size=(count, 3))


class RansacTests(SimpleTestCase):

    def test_exact_plane(self):
        rng = np.random.default_rng(0)
        points = np.column_stack([rng.uniform(-10, 10, 100), rng.uniform(-10, 10, 100), np.zeros(100)])
        plane = ransac_ground(points)
        np.testing.assert_allclose(plane.normal, [0.0, 0.0, 1.0], atol=1e-12)
        self.assertAlmostEqual(plane.offset, 0.0)
        self.assertEqual(plane.inlier_count, 100)

    def test_plane_with_outliers(self):
        rng = np.random.default_rng(1)
        inliers = np.column_stack([rng.uniform(-5, 5, 400), rng.uniform(-5, 5, 400), np.zeros(400)])
        outliers = rng.uniform(-5, 5, size=(100, 3))
        plane = ransac_ground(np.vstack([inliers, outliers]), inlier_threshold=0.05, seed=4)
        angle = np.degrees(np.arccos(np.clip(plane.normal @ [0.0, 0.0, 1.0], -1.0, 1.0)))
        self.assertLess(angle, 1.0)
        self.assertGreaterEqual(plane.inlier_mask[:400].mean(), 0.99)

    def test_too_few_points(self):
        with self.assertRaises(GeometryError) as ctx:
            ransac_ground(np.zeros((2, 3)))
        self.assertEqual(ctx.exception.code, 'TOO_FEW_POINTS')

    def test_collinear_points(self):
        points = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        with self.assertRaises(DegeneratePlaneError):
            ransac_ground(points, iterations=20)

    def test_same_seed_same_plane(self):
        points = np.random.default_rng(2).uniform(-5, 5, size=(60, 3))
        first = ransac_ground(points, seed=9)
        second = ransac_ground(points, seed=9)
        np.testing.assert_array_equal(first.inlier_mask, second.inlier_mask)
        self.assertEqual(first.best_iteration, second.best_iteration)

    def test_params_are_validated(self):
        with self.assertRaises(ConfigurationError):
            RansacParams(inlier_threshold=0.0)


def reachability_oracle(points, eps, min_pts):
    """Core-point components and the noise set from an O(N^2) distance matrix."""
    distances = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    adjacency = distances <= eps
    core = adjacency.sum(axis=1) >= min_pts
    core_graph = csr_matrix(adjacency & core[:, None] & core[None, :])
    _, components = connected_components(core_graph, directed=False)
    noise = ~core & ~(adjacency & core[None, :]).any(axis=1)
    return core, components, noise, adjacency


class DensityClusterTests(SimpleTestCase):

    def test_separated_blobs(self):
        eps = 0.5
        points = np.vstack([blob([0.0, 0.0, 0.0]), blob([10 * eps, 0.0, 0.0], seed=1)])
        result = density_cluster(points, eps=eps, min_pts=5)
        self.assertEqual(result.segment_count, 2)
        self.assertFalse(np.any(result.labels == 0))
        np.testing.assert_array_equal(result.labels[:20], 1)
        np.testing.assert_array_equal(result.labels[20:], 2)

    def test_matches_brute_force_reachability(self):
        points = np.random.default_rng(5).uniform(0.0, 3.0, size=(50, 3))
        eps, min_pts = 0.6, 3
        result = density_cluster(points, eps=eps, min_pts=min_pts, min_segment_size=1)
        core, components, noise, adjacency = reachability_oracle(points, eps, min_pts)

        np.testing.assert_array_equal(result.labels == 0, noise)
        core_ids = np.flatnonzero(core)
        for i in core_ids:
            for j in core_ids:
                self.assertEqual(components[i] == components[j], result.labels[i] == result.labels[j])
        for border in np.flatnonzero(~core & ~noise):
            reachable = {result.labels[j] for j in np.flatnonzero(adjacency[border] & core)}
            self.assertIn(result.labels[border], reachable)

    def test_grid_and_brute_indexes_agree(self):
        points = np.random.default_rng(6).uniform(0.0, 4.0, size=(300, 3))
        grid = density_cluster(points, eps=0.5, min_pts=4, index='grid')
        brute = density_cluster(points, eps=0.5, min_pts=4, index='brute')
        np.testing.assert_array_equal(grid.labels, brute.labels)

    def test_isolated_point_is_noise(self):
        result = density_cluster(np.array([[0.0, 0.0, 0.0]]), eps=0.5, min_pts=2)
        np.testing.assert_array_equal(result.labels, [0])
        self.assertEqual(result.segment_count, 0)

    def test_small_segments_become_noise(self):
        points = np.vstack([blob([0.0, 0.0, 0.0], count=20), blob([5.0, 0.0, 0.0], count=4, seed=2)])
        result = density_cluster(points, eps=0.5, min_pts=3, min_segment_size=5)
        self.assertEqual(result.segment_count, 1)
        np.testing.assert_array_equal(result.labels[20:], 0)

    def test_default_minimum_segment_size_matches_params(self):
        points = np.vstack([blob([0.0, 0.0, 0.0], count=20), blob([5.0, 0.0, 0.0], count=4, seed=2)])
        result = density_cluster(points, eps=0.5, min_pts=3)
        self.assertEqual(ClusterParams().min_segment_size, 5)
        self.assertEqual(result.segment_count, 1)
        np.testing.assert_array_equal(result.labels[20:], 0)

    def test_point_order_does_not_change_the_partition(self):
        rng = np.random.default_rng(9)
        points = rng.uniform(0.0, 3.0, size=(80, 3))
        order = rng.permutation(len(points))
        original = density_cluster(points, eps=0.6, min_pts=3, min_segment_size=1)
        permuted = density_cluster(points[order], eps=0.6, min_pts=3, min_segment_size=1)
        restored = np.empty_like(permuted.labels)
        restored[order] = permuted.labels
        core, _, _, _ = reachability_oracle(points, 0.6, 3)

        np.testing.assert_array_equal(restored == 0, original.labels == 0)
        self.assertEqual(permuted.segment_count, original.segment_count)
        pairs = set(zip(original.labels[core], restored[core]))
        self.assertEqual(len(pairs), len(set(original.labels[core])))
        self.assertEqual(len(pairs), len(set(restored[core])))

    def test_unknown_index(self):
        with self.assertRaises(ConfigurationError):
            ClusterParams(index='kdtree')


class SegmentationTests(SimpleTestCase):

    def test_scan_removes_ground(self):
        points = np.vstack([ground_grid(), blob([2.0, 2.0, 1.0]), blob([-2.0, -2.0, 1.0], seed=3)])
        result = segment_scan(points, cluster=ClusterParams(eps=0.5, min_pts=5, min_segment_size=5))
        ground = len(ground_grid())
        np.testing.assert_array_equal(result.labels[:ground], 0)
        self.assertTrue(np.all(result.ground_mask[:ground]))
        self.assertEqual(result.segment_count, 2)

    def test_static_objects_keep_ids_across_frames(self):
        spec = SceneSpecFactory(objects=(
            ObjectSpecFactory(),
            ObjectSpecFactory(center=(14.0, 6.0, 0.75), size=(3.0, 1.2, 1.5), semantic_class=4),
        ))
        sequence = synthesize_scene(spec)
        aggregated = aggregate_frames(sequence.clouds(), sequence.poses)
        assignment = segment_aggregate_and_map(aggregated, cluster=ClusterParams(eps=1.5, min_pts=3, min_segment_size=3))

        ids = []
        for instance in (1, 2):
            labels = assignment.labels[aggregated.gt_instance == instance]
            found = np.unique(labels[labels > 0])
            self.assertEqual(len(found), 1)
            self.assertGreaterEqual((labels > 0).mean(), 0.9)
            ids.append(int(found[0]))
            for frame, (cloud, _) in enumerate(sequence):
                view = assignment.per_frame_views[frame]
                self.assertIn(ids[-1], view[cloud.gt_instance == instance])
        self.assertNotEqual(ids[0], ids[1])

    def test_single_frame_aggregate_matches_scan(self):
        points = np.vstack([ground_grid(), blob([1.0, 1.0, 1.0])])
        aggregated = aggregate_frames([cloud_from(points)], [np.eye(4)])
        mapped = segment_aggregate_and_map(aggregated)
        direct = segment_scan(points)
        np.testing.assert_array_equal(mapped.per_frame_views[0], direct.labels)

    def test_object_only_in_second_frame(self):
        first = np.vstack([ground_grid(), blob([2.0, 2.0, 1.0])])
        second = np.vstack([ground_grid(), blob([2.0, 2.0, 1.0], seed=7), blob([-3.0, -3.0, 1.0], seed=8)])
        aggregated = aggregate_frames([cloud_from(first), cloud_from(second, 1)], [np.eye(4), np.eye(4)])
        assignment = segment_aggregate_and_map(aggregated)
        late = np.unique(assignment.per_frame_views[1][-20:])
        self.assertEqual(len(late), 1)
        self.assertNotEqual(late[0], 0)
        self.assertNotIn(late[0], assignment.per_frame_views[0])
        self.assertEqual(frame_assignment(assignment, 1).segment_count, assignment.segment_count)

    def test_empty_aggregate(self):
        aggregated = aggregate_frames([cloud_from(np.zeros((0, 3)))], [np.eye(4)])
        with self.assertRaises(GeometryError):
            segment_aggregate_and_map(aggregated)


class StorageTests(SimpleTestCase):

    def test_round_trip(self):
        labels = np.array([0, 1, 1, 2, 0, 3])
        decoded = decode_segment_labels(encode_segment_labels(labels, 3))
        np.testing.assert_array_equal(decoded.labels, labels)
        self.assertEqual(decoded.segment_count, 3)

    def test_label_overflow(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_segment_labels(encode_segment_labels([0, 4], 2))
        self.assertEqual(ctx.exception.code, DatasetFormatError.LABEL_OVERFLOW)
