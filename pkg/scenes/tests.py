import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DatasetFormatError, SceneSpecError
from geometry.services import transform_coords
from scenes.datatypes import CameraFrame, SourceProfile
from scenes.factories import ObjectSpecFactory, PointCloudFactory, SceneSpecFactory, SourceProfileFactory
from scenes.presets import CLASS_NAMES, DEFAULT_SOURCES, default_corpus_specs, default_scene_spec
from scenes.services import synthesize_scene
from scenes.storage import (
    decode_point_cloud,
    encode_camera_frame,
    encode_point_cloud,
    read_dataset,
    read_point_cloud,
    write_dataset,
)


class SceneSpecTests(SimpleTestCase):

    def test_degenerate_scene_is_rejected(self):
        with self.assertRaises(SceneSpecError) as ctx:
            SceneSpecFactory(objects=(), ground_extent=0.0)
        self.assertEqual(ctx.exception.code, 'DEGENERATE_SCENE')

    def test_class_zero_is_reserved_for_ground(self):
        with self.assertRaises(SceneSpecError):
            ObjectSpecFactory(semantic_class=0)

    def test_bad_intensity_range(self):
        with self.assertRaises(SceneSpecError):
            SourceProfile(source_id=3, intensity_range=(1.0, 1.0))

    def test_dropout_rate_must_be_below_one(self):
        with self.assertRaises(SceneSpecError):
            SourceProfileFactory(dropout_rate=1.0)

    def test_instance_ids_start_at_one(self):
        spec = SceneSpecFactory(objects=(ObjectSpecFactory(), ObjectSpecFactory(center=(20.0, 5.0, 0.75), semantic_class=4)))
        self.assertEqual(spec.instance_classes(), {1: 1, 2: 4})

    def test_default_corpus_covers_sources(self):
        specs = default_corpus_specs(0, scenes_per_source=2, azimuth_count=90)
        self.assertEqual(sorted(specs), sorted(DEFAULT_SOURCES))
        self.assertEqual(len(specs['A']), 2)
        self.assertNotEqual(specs['A'][0].scene_id, specs['B'][0].scene_id)
        for spec in specs['B']:
            self.assertEqual(len(spec.beam_elevations), DEFAULT_SOURCES['B'].beam_count)
            for obj in spec.objects:
                self.assertIn(obj.semantic_class, CLASS_NAMES)


class SynthesisTests(SimpleTestCase):

    def test_points_lie_on_ground_or_box_surface(self):
        spec = SceneSpecFactory()
        sequence = synthesize_scene(spec)
        cloud = sequence[0][0]
        world = transform_coords(cloud.coords, sequence.poses[0])
        ground = cloud.gt_instance == 0
        self.assertTrue(np.any(ground))
        self.assertTrue(np.any(~ground))
        np.testing.assert_allclose(world[ground, 2], 0.0, atol=1e-9)

        box = spec.objects[0]
        low = np.asarray(box.center) - np.asarray(box.size) / 2
        high = np.asarray(box.center) + np.asarray(box.size) / 2
        on_box = world[~ground]
        self.assertTrue(np.all(on_box >= low - 1e-9))
        self.assertTrue(np.all(on_box <= high + 1e-9))
        face_gap = np.minimum(np.abs(on_box - low), np.abs(on_box - high)).min(axis=1)
        self.assertLess(face_gap.max(), 1e-9)

    def test_labels_follow_instances(self):
        sequence = synthesize_scene(SceneSpecFactory())
        cloud = sequence[0][0]
        np.testing.assert_array_equal(cloud.gt_semantic[cloud.gt_instance == 1], 1)
        np.testing.assert_array_equal(cloud.gt_semantic[cloud.gt_instance == 0], 0)

    def test_dropout_halves_point_count(self):
        full = synthesize_scene(SceneSpecFactory(rng_seed=5))[0][0]
        dropped = synthesize_scene(SceneSpecFactory(rng_seed=5, source_profile=SourceProfileFactory(dropout_rate=0.5)))[0][0]
        n = len(full)
        sigma = np.sqrt(n * 0.25)
        self.assertLess(abs(len(dropped) - n / 2), 5 * sigma)

    def test_intensity_within_source_range(self):
        sequence = synthesize_scene(SceneSpecFactory(source_profile=SourceProfileFactory(intensity_range=(0.0, 1.0))))
        intensity = sequence[0][0].features[:, 0]
        self.assertTrue(np.all((intensity >= 0.0) & (intensity <= 1.0)))

    def test_same_spec_gives_identical_bytes(self):
        spec = SceneSpecFactory(rng_seed=11)
        first = synthesize_scene(spec)
        second = synthesize_scene(spec, threads=2)
        for (cloud_a, camera_a), (cloud_b, camera_b) in zip(first, second):
            self.assertEqual(encode_point_cloud(cloud_a), encode_point_cloud(cloud_b))
            self.assertEqual(encode_camera_frame(camera_a), encode_camera_frame(camera_b))

    def test_camera_mask_and_semantic_mask(self):
        sequence = synthesize_scene(SceneSpecFactory())
        camera = sequence[0][1]
        self.assertEqual(camera.rgb.shape, (camera.height, camera.width, 3))
        self.assertTrue(np.any(camera.gt_mask == 1))
        semantic = sequence.semantic_mask(0)
        np.testing.assert_array_equal(semantic[camera.gt_mask == 1], 1)
        np.testing.assert_array_equal(semantic[camera.gt_mask == 0], 0)

    def test_camera_frame_shapes_are_checked(self):
        with self.assertRaises(SceneSpecError):
            CameraFrame(rgb=np.zeros((4, 4, 3)), gt_mask=np.zeros((4, 5)), intrinsics=np.eye(3),
                        extrinsics=np.eye(4), frame_index=0)

    def test_camera_frame_calibration_is_checked(self):
        rgb, mask = np.zeros((4, 4, 3)), np.zeros((4, 4))
        with self.assertRaises(SceneSpecError):
            CameraFrame(rgb=rgb, gt_mask=mask, intrinsics=np.zeros((3, 3)), extrinsics=np.eye(4), frame_index=0)
        with self.assertRaises(SceneSpecError):
            CameraFrame(rgb=rgb, gt_mask=mask, intrinsics=np.eye(3), extrinsics=np.eye(4) * 2.0, frame_index=0)
        frame = CameraFrame(rgb=rgb, gt_mask=mask, intrinsics=np.eye(3), extrinsics=np.eye(4), frame_index=0)
        self.assertEqual((frame.height, frame.width), (4, 4))

    def test_default_scene_has_objects_in_view(self):
        spec = default_scene_spec(0, DEFAULT_SOURCES['A'], azimuth_count=180)
        sequence = synthesize_scene(spec)
        self.assertEqual(len(sequence), 2)
        self.assertGreater(len(np.unique(sequence[0][1].gt_mask)), 1)


class StorageTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.sequence = synthesize_scene(SceneSpecFactory(scene_id='stored'))

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        write_dataset([self.sequence], self.root)
        (loaded,) = read_dataset(self.root)
        self.assertEqual(loaded.scene_id, 'stored')
        self.assertEqual(loaded.source_profile, self.sequence.source_profile)
        self.assertEqual(loaded.instance_classes, self.sequence.instance_classes)
        for (cloud, camera), (original, original_camera) in zip(loaded, self.sequence):
            np.testing.assert_array_equal(cloud.coords, original.coords.astype(np.float32).astype(np.float64))
            np.testing.assert_array_equal(cloud.gt_semantic, original.gt_semantic)
            np.testing.assert_array_equal(cloud.gt_instance, original.gt_instance)
            self.assertEqual(cloud.timestamp, original.timestamp)
            np.testing.assert_array_equal(camera.gt_mask, original_camera.gt_mask)
            np.testing.assert_array_equal(camera.intrinsics, original_camera.intrinsics)
        for pose, original in zip(loaded.poses, self.sequence.poses):
            np.testing.assert_array_equal(pose, original)

    def test_point_cloud_codec(self):
        cloud = PointCloudFactory(points=5)
        decoded = decode_point_cloud(encode_point_cloud(cloud))
        self.assertEqual(len(decoded), 5)
        self.assertEqual(decoded.feature_dim, 2)

    def test_corrupted_magic(self):
        write_dataset(self.sequence, self.root)
        path = self.root / 'stored' / 'pc_000000.bin'
        data = bytearray(path.read_bytes())
        data[0:3] = b'XYZ'
        path.write_bytes(bytes(data))
        with self.assertRaises(DatasetFormatError) as ctx:
            read_point_cloud(path)
        self.assertEqual(ctx.exception.code, DatasetFormatError.BAD_MAGIC)

    def test_missing_frame_file(self):
        write_dataset(self.sequence, self.root)
        (self.root / 'stored' / 'im_000001.bin').unlink()
        with self.assertRaises(DatasetFormatError) as ctx:
            read_dataset(self.root)
        self.assertEqual(ctx.exception.code, DatasetFormatError.MISSING_FRAME)

    def test_missing_manifest(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            read_dataset(self.root / 'empty')
        self.assertEqual(ctx.exception.code, DatasetFormatError.MISSING_FRAME)
