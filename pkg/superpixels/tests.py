import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import ndimage

from core.exceptions import ConfigurationError, DatasetFormatError, GeometryError
from geometry.services import pixel_indices, project_coords, project_points
from scenes.factories import SceneSpecFactory
from scenes.services import synthesize_scene
from superpixels.datatypes import KIND_SEMANTIC, SuperpixelMap
from superpixels.services import (
    densify_labels,
    enforce_connectivity,
    group_superpoints,
    noisy_semantic_superpixels,
    semantic_superpixels_from_mask,
    slic_superpixels,
)
from superpixels.storage import (
    decode_superpixel_map,
    encode_superpixel_map,
    load_superpixel_map,
    write_superpixel_map,
)


def partition_agreement(labels, reference):
    """Fraction of pixels whose label matches the reference under the best label mapping."""
    agreed = 0
    for label in np.unique(labels):
        agreed += np.bincount(reference[labels == label]).max()
    return agreed / labels.size


class SlicTests(SimpleTestCase):

    def test_uniform_image_gives_equal_rectangles(self):
        result = slic_superpixels(np.full((16, 16, 3), 0.5), 4)
        self.assertEqual(result.segment_count, 4)
        sizes = result.segment_sizes()[1:]
        self.assertTrue(np.all(np.abs(sizes - 64) <= 6))
        for label in range(1, 5):
            rows, cols = np.nonzero(result.labels == label)
            self.assertEqual(len(rows), (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1))

    def test_boundary_follows_color_edge(self):
        rgb = np.zeros((16, 32, 3))
        rgb[:, 13:] = [1.0, 0.2, 0.0]
        reference = np.zeros((16, 32), dtype=np.int64)
        reference[:, 13:] = 1
        result = slic_superpixels(rgb, 2, compactness=0.1)
        self.assertEqual(result.segment_count, 2)
        self.assertGreaterEqual(partition_agreement(result.labels, reference), 0.99)

    def test_single_segment(self):
        rgb = np.random.default_rng(0).uniform(size=(6, 9, 3))
        result = slic_superpixels(rgb, 1)
        np.testing.assert_array_equal(result.labels, 1)
        self.assertEqual(result.segment_count, 1)

    def test_every_pixel_is_labeled(self):
        rgb = np.random.default_rng(1).uniform(size=(12, 20, 3))
        result = slic_superpixels(rgb, 6)
        self.assertTrue(np.all(result.labels >= 1))
        self.assertEqual(set(np.unique(result.labels)), set(range(1, result.segment_count + 1)))

    def test_too_many_segments(self):
        with self.assertRaises(ConfigurationError) as ctx:
            slic_superpixels(np.zeros((2, 2, 3)), 5)
        self.assertEqual(ctx.exception.code, 'TOO_MANY_SEGMENTS')

    def test_connectivity_merges_fragments(self):
        labels = np.array([
            [1, 1, 2, 2],
            [1, 2, 2, 2],
            [2, 2, 1, 2],
            [2, 2, 2, 2],
        ])
        merged = enforce_connectivity(labels)
        self.assertEqual(merged[2, 2], 2)
        self.assertEqual(merged[0, 0], 1)


class SemanticSuperpixelTests(SimpleTestCase):

    def test_three_instances(self):
        mask = np.array([[0, 4, 4], [7, 7, 0], [9, 9, 9]])
        result = semantic_superpixels_from_mask(mask)
        self.assertEqual(result.segment_count, 3)
        self.assertEqual(result.kind, KIND_SEMANTIC)
        self.assertEqual(result.remap, {4: 1, 7: 2, 9: 3})
        np.testing.assert_array_equal(result.labels[mask == 0], 0)

    def test_all_zero_mask(self):
        result = semantic_superpixels_from_mask(np.zeros((3, 3), dtype=np.int64))
        self.assertEqual(result.segment_count, 0)
        np.testing.assert_array_equal(result.labels, 0)

    def test_dense_mask_is_unchanged(self):
        mask = np.array([[1, 2], [3, 1]])
        np.testing.assert_array_equal(semantic_superpixels_from_mask(mask).labels, mask)

    def test_densify_holes(self):
        dense, count, remap = densify_labels(np.array([[1, 3], [0, 3]]))
        np.testing.assert_array_equal(dense, [[1, 2], [0, 2]])
        self.assertEqual(count, 2)
        self.assertEqual(remap, {1: 1, 3: 2})

    def test_noisy_oracle_only_splits(self):
        mask = np.zeros((8, 8), dtype=np.int64)
        mask[:, :4] = 1
        mask[:, 4:] = 2
        noisy = noisy_semantic_superpixels(mask, split_prob=1.0, seed=3)
        self.assertEqual(noisy.segment_count, 4)
        for label in range(1, noisy.segment_count + 1):
            self.assertEqual(len(np.unique(mask[noisy.labels == label])), 1)


class StorageTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        original = slic_superpixels(np.random.default_rng(2).uniform(size=(10, 12, 3)), 4)
        path = write_superpixel_map(original, self.root / 'sp_000000.bin')
        loaded = load_superpixel_map(path)
        np.testing.assert_array_equal(loaded.labels, original.labels)
        self.assertEqual(loaded.segment_count, original.segment_count)
        self.assertEqual(loaded.kind, original.kind)

    def test_label_overflow(self):
        data = encode_superpixel_map(SuperpixelMap(labels=np.array([[1, 2]]), segment_count=1))
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_superpixel_map(data)
        self.assertEqual(ctx.exception.code, DatasetFormatError.LABEL_OVERFLOW)

    def test_holes_are_densified(self):
        data = encode_superpixel_map(SuperpixelMap(labels=np.array([[1, 0], [3, 3]]), segment_count=3))
        loaded = decode_superpixel_map(data)
        self.assertEqual(loaded.segment_count, 2)
        self.assertEqual(loaded.remap, {1: 1, 3: 2})
        np.testing.assert_array_equal(loaded.labels, [[1, 0], [2, 2]])

    def test_truncated(self):
        data = encode_superpixel_map(SuperpixelMap(labels=np.ones((3, 3), dtype=np.int64), segment_count=1))
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_superpixel_map(data[:-2])
        self.assertEqual(ctx.exception.code, DatasetFormatError.TRUNCATED)

    def test_bad_magic(self):
        data = encode_superpixel_map(SuperpixelMap(labels=np.ones((2, 2), dtype=np.int64), segment_count=1))
        with self.assertRaises(DatasetFormatError) as ctx:
            decode_superpixel_map(b'NOTASPMP' + data[8:])
        self.assertEqual(ctx.exception.code, DatasetFormatError.BAD_MAGIC)


class GroupingTests(SimpleTestCase):

    def test_single_segment_holds_all_valid_points(self):
        coords = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [2.0, 3.0, 1.0], [0.0, 0.0, -1.0]])
        projections = project_coords(coords, np.eye(3), np.eye(4), 5, 5)
        groups = group_superpoints(projections, SuperpixelMap(labels=np.ones((5, 5), dtype=np.int64), segment_count=1))
        self.assertEqual(groups.segment_ids, [1])
        np.testing.assert_array_equal(groups.groups[1], [0, 1, 2])
        np.testing.assert_array_equal(groups.uncovered_points, [3])

    def test_unlabeled_pixels_and_empty_segments(self):
        labels = np.zeros((5, 5), dtype=np.int64)
        labels[:, 3:] = 1
        labels[4, 0] = 2
        projections = project_coords([[0.0, 0.0, 1.0], [4.0, 1.0, 1.0]], np.eye(3), np.eye(4), 5, 5)
        groups = group_superpoints(projections, SuperpixelMap(labels=labels, segment_count=2))
        np.testing.assert_array_equal(groups.groups[1], [1])
        np.testing.assert_array_equal(groups.uncovered_points, [0])
        self.assertEqual(groups.empty_segments, [2])
        np.testing.assert_array_equal(groups.point_labels(), [0, 1])

    def test_shape_mismatch(self):
        projections = project_coords([[0.0, 0.0, 1.0]], np.eye(3), np.eye(4), 5, 5)
        with self.assertRaises(GeometryError):
            group_superpoints(projections, SuperpixelMap(labels=np.ones((4, 5), dtype=np.int64), segment_count=1))

    def test_relabeling_segments_relabels_groups(self):
        sequence = synthesize_scene(SceneSpecFactory())
        cloud, camera = sequence[0]
        projections = project_points(cloud, camera)
        superpixel_map = slic_superpixels(camera.rgb, 24)
        lookup = np.concatenate([[0], 1 + np.random.default_rng(3).permutation(superpixel_map.segment_count)])
        relabeled = SuperpixelMap(labels=lookup[superpixel_map.labels], segment_count=superpixel_map.segment_count)

        groups = group_superpoints(projections, superpixel_map)
        moved = group_superpoints(projections, relabeled)
        self.assertEqual(sorted(lookup[groups.segment_ids].tolist()), moved.segment_ids)
        for segment, members in groups.groups.items():
            np.testing.assert_array_equal(moved.groups[int(lookup[segment])], members)
        np.testing.assert_array_equal(moved.uncovered_points, groups.uncovered_points)
        self.assertEqual(sorted(lookup[groups.empty_segments].tolist()), sorted(moved.empty_segments))

    def test_oracle_groups_are_instance_pure(self):
        sequence = synthesize_scene(SceneSpecFactory())
        cloud, camera = sequence[0]
        projections = project_points(cloud, camera)
        groups = group_superpoints(projections, semantic_superpixels_from_mask(camera.gt_mask))
        self.assertGreater(len(groups), 0)

        # Only pixels whose 3x3 neighbourhood carries one instance; rounding
        # at silhouettes may legitimately move a point across.
        interior = ndimage.maximum_filter(camera.gt_mask, size=3) == ndimage.minimum_filter(camera.gt_mask, size=3)
        rows, cols = pixel_indices(projections)
        agreeing = total = 0
        for members in groups.groups.values():
            members = members[interior[rows[members], cols[members]]]
            if members.size:
                agreeing += np.bincount(cloud.gt_instance[members]).max()
                total += len(members)
        self.assertGreater(total, 0)
        self.assertGreaterEqual(agreeing / total, 0.99)
