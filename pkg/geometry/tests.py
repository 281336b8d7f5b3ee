import numpy as np
from django.test import SimpleTestCase
from scipy.spatial.transform import Rotation

from core.exceptions import GeometryError
from geometry.services import (
    aggregate_frames,
    invert_pose,
    perturb_extrinsics,
    pixel_indices,
    project_coords,
    project_points,
    scatter_to_frames,
    split_by_origin,
    transform_coords,
    transform_to_global,
)
from scenes.datatypes import CameraFrame
from scenes.factories import PointCloudFactory, SceneSpecFactory
from scenes.presets import pose_matrix
from scenes.services import synthesize_scene


def camera_frame(intrinsics, extrinsics=None, height=480, width=640):
    return CameraFrame(
        rgb=np.zeros((height, width, 3)),
        gt_mask=np.zeros((height, width), dtype=np.int64),
        intrinsics=np.asarray(intrinsics, dtype=np.float64),
        extrinsics=np.eye(4) if extrinsics is None else extrinsics,
        frame_index=0,
    )


class ProjectionTests(SimpleTestCase):

    def test_optical_axis_maps_to_principal_point(self):
        batch = project_coords([[0.0, 0.0, 5.0]], np.eye(3), np.eye(4), 10, 10)
        projection = batch[0]
        self.assertEqual(projection.pixel, (0.0, 0.0))
        self.assertEqual(projection.depth, 5.0)
        self.assertTrue(projection.valid)

    def test_hand_computed_projection(self):
        intrinsics = [[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]]
        batch = project_coords([[1.0, 0.5, 2.0]], np.asarray(intrinsics), np.eye(4), 480, 640)
        np.testing.assert_allclose(batch.pixels[0], [570.0, 365.0])
        self.assertTrue(batch.valid[0])

    def test_point_behind_camera_is_invalid(self):
        batch = project_coords([[0.0, 0.0, -1.0]], np.eye(3), np.eye(4), 10, 10)
        self.assertFalse(batch.valid[0])

    def test_zero_depth_is_invalid_without_fault(self):
        batch = project_coords([[1.0, 1.0, 0.0], [0.0, 0.0, 1e-12]], np.eye(3), np.eye(4), 10, 10)
        np.testing.assert_array_equal(batch.valid, [False, False])
        self.assertTrue(np.all(np.isnan(batch.pixels)))

    def test_outside_image_is_invalid(self):
        intrinsics = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
        batch = project_coords([[10.0, 0.0, 1.0]], intrinsics, np.eye(4), 480, 640)
        self.assertFalse(batch.valid[0])

    def test_project_points_checks_extrinsics(self):
        cloud = PointCloudFactory(points=4)
        frame = camera_frame(np.eye(3))
        frame.extrinsics = np.eye(4) * 2.0
        with self.assertRaises(GeometryError):
            project_points(cloud, frame)

    def test_output_keeps_input_order(self):
        cloud = PointCloudFactory(points=50)
        batch = project_points(cloud, camera_frame([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]]))
        self.assertEqual(len(batch), 50)
        np.testing.assert_allclose(batch.depth, cloud.coords[:, 2])

    def test_pixel_indices_round_into_range(self):
        batch = project_coords([[9.7, 0.2, 1.0], [0.0, 0.0, -1.0]], np.eye(3), np.eye(4), 10, 10)
        rows, cols = pixel_indices(batch)
        self.assertEqual((rows[0], cols[0]), (0, 9))
        self.assertEqual((rows[1], cols[1]), (-1, -1))


class TransformTests(SimpleTestCase):

    def test_identity_pose(self):
        cloud = PointCloudFactory(points=8)
        moved = transform_to_global(cloud, np.eye(4))
        np.testing.assert_array_equal(moved.coords, cloud.coords)
        np.testing.assert_array_equal(moved.features, cloud.features)

    def test_translation(self):
        pose = np.eye(4)
        pose[:3, 3] = [1.0, 2.0, 3.0]
        np.testing.assert_array_equal(transform_coords([[0.0, 0.0, 0.0]], pose), [[1.0, 2.0, 3.0]])

    def test_inverse_round_trip(self):
        pose = np.eye(4)
        pose[:3, :3] = Rotation.from_euler('zyx', [0.4, -0.2, 0.1]).as_matrix()
        pose[:3, 3] = [3.0, -1.0, 2.0]
        cloud = PointCloudFactory(points=20)
        back = transform_to_global(transform_to_global(cloud, pose), invert_pose(pose))
        np.testing.assert_allclose(back.coords, cloud.coords, atol=1e-9)

    def test_non_rigid_pose(self):
        pose = np.eye(4)
        pose[0, 0] = 1.01
        with self.assertRaises(GeometryError):
            transform_to_global(PointCloudFactory(points=3), pose)


class AggregationTests(SimpleTestCase):

    def test_single_frame(self):
        cloud = PointCloudFactory(points=12)
        aggregated = aggregate_frames([cloud], [np.eye(4)])
        np.testing.assert_array_equal(aggregated.origin_frame, 0)
        np.testing.assert_array_equal(aggregated.origin_index, np.arange(12))
        np.testing.assert_array_equal(aggregated.coords, cloud.coords)

    def test_two_frames_partition(self):
        clouds = [PointCloudFactory(points=10), PointCloudFactory(points=15, seed=3)]
        aggregated = aggregate_frames(clouds, [np.eye(4), pose_matrix(x=1.0)])
        self.assertEqual(len(aggregated), 25)
        self.assertEqual(aggregated.frame_sizes, (10, 15))
        self.assertEqual(int(aggregated.frame_mask(0).sum()), 10)
        self.assertEqual(int(aggregated.frame_mask(1).sum()), 15)
        np.testing.assert_array_equal(aggregated.origin_index[aggregated.frame_mask(1)], np.arange(15))

    def test_length_mismatch(self):
        with self.assertRaises(GeometryError) as ctx:
            aggregate_frames([PointCloudFactory()], [np.eye(4), np.eye(4)])
        self.assertEqual(ctx.exception.code, 'LENGTH_MISMATCH')

    def test_scatter_and_split(self):
        clouds = [PointCloudFactory(points=6), PointCloudFactory(points=4, seed=9)]
        poses = [pose_matrix(x=0.0), pose_matrix(x=2.0, yaw=0.3)]
        aggregated = aggregate_frames(clouds, poses)
        views = scatter_to_frames(aggregated, np.arange(10))
        np.testing.assert_array_equal(views[0], np.arange(6))
        np.testing.assert_array_equal(views[1], np.arange(6, 10))
        for recovered, cloud in zip(split_by_origin(aggregated, poses), clouds):
            np.testing.assert_allclose(recovered, cloud.coords, atol=1e-9)

    def test_static_ground_coincides_across_frames(self):
        sequence = synthesize_scene(SceneSpecFactory())
        aggregated = aggregate_frames(sequence.clouds(), sequence.poses)
        ground = aggregated.gt_instance == 0
        np.testing.assert_allclose(aggregated.coords[ground, 2], 0.0, atol=1e-6)
        for frame in range(2):
            self.assertTrue(np.any(aggregated.gt_instance[aggregated.frame_mask(frame)] == 1))


class MisalignmentTests(SimpleTestCase):

    def test_zero_fractions_keep_extrinsics(self):
        extrinsics = pose_matrix(x=0.5)
        np.testing.assert_allclose(perturb_extrinsics(extrinsics, 0.0, 0.0, np.random.default_rng(0)), extrinsics)

    def test_noise_magnitudes(self):
        perturbed = perturb_extrinsics(np.eye(4), 0.1, 0.5, np.random.default_rng(1))
        self.assertAlmostEqual(float(np.linalg.norm(perturbed[:3, 3])), 0.1)
        angle = Rotation.from_matrix(perturbed[:3, :3]).magnitude()
        self.assertAlmostEqual(float(angle), np.pi / 2)

    def test_negative_fraction(self):
        with self.assertRaises(GeometryError):
            perturb_extrinsics(np.eye(4), -0.1, 0.0, np.random.default_rng(0))
