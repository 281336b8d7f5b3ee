import logging
import math
from dataclasses import replace

import numpy as np
from scipy.spatial.transform import Rotation

from core.exceptions import GeometryError
from core.utils import run_validators
from core.validators import validate_intrinsics, validate_rigid_transform

from .datatypes import AggregatedCloud, ProjectionBatch


logger = logging.getLogger(__name__)


NEAR_PLANE = 1e-3
ZERO_DEPTH = 1e-9
RIGID_TOLERANCE = 1e-6


def check_pose(pose, tolerance=RIGID_TOLERANCE):
    """Return the pose as a float array or raise GeometryError if not rigid."""
    pose = np.asarray(pose, dtype=np.float64)
    run_validators(pose, [validate_rigid_transform(tolerance)], GeometryError)
    return pose


def project_coords(coords, intrinsics, extrinsics, height, width):
    """
    Project LiDAR-frame points into an image.

    Args:
        coords: (N, 3) LiDAR-frame points
        intrinsics: 3x3 camera matrix
        extrinsics: 4x4 LiDAR -> camera transform
        height, width: image size in pixels

    Returns:
        ProjectionBatch in input order
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    camera = coords @ extrinsics[:3, :3].T + extrinsics[:3, 3]
    depth = camera[:, 2]

    usable = np.abs(depth) >= ZERO_DEPTH
    safe_depth = np.where(usable, depth, 1.0)
    homogeneous = camera @ intrinsics.T
    pixels = homogeneous[:, :2] / safe_depth[:, None]
    pixels[~usable] = np.nan

    valid = usable & (depth > NEAR_PLANE)
    with np.errstate(invalid='ignore'):
        valid &= (pixels[:, 0] >= 0) & (pixels[:, 0] < width) & (pixels[:, 1] >= 0) & (pixels[:, 1] < height)
    return ProjectionBatch(pixels=pixels, depth=depth, valid=valid, height=height, width=width)


def project_points(cloud, frame):
    """
    Project a point cloud into its camera frame.

    Args:
        cloud: PointCloud in the LiDAR frame
        frame: CameraFrame

    Returns:
        ProjectionBatch, one entry per point in input order
    """
    run_validators(frame.intrinsics, [validate_intrinsics], GeometryError)
    extrinsics = check_pose(frame.extrinsics)
    return project_coords(cloud.coords, frame.intrinsics, extrinsics, frame.height, frame.width)


def pixel_indices(projections):
    """
    Nearest-integer pixel (row, col) for each projection.

    Values in [W - 0.5, W) round down into range. Invalid projections get -1.
    """
    rows = np.full(len(projections), -1, dtype=np.int64)
    cols = np.full(len(projections), -1, dtype=np.int64)
    valid = projections.valid
    cols[valid] = np.minimum(np.floor(projections.pixels[valid, 0] + 0.5), projections.width - 1).astype(np.int64)
    rows[valid] = np.minimum(np.floor(projections.pixels[valid, 1] + 0.5), projections.height - 1).astype(np.int64)
    return rows, cols


def transform_coords(coords, pose):
    pose = np.asarray(pose, dtype=np.float64)
    return np.asarray(coords, dtype=np.float64) @ pose[:3, :3].T + pose[:3, 3]


def invert_pose(pose):
    pose = np.asarray(pose, dtype=np.float64)
    inverse = np.eye(4)
    inverse[:3, :3] = pose[:3, :3].T
    inverse[:3, 3] = -pose[:3, :3].T @ pose[:3, 3]
    return inverse


def transform_to_global(cloud, pose):
    """
    Apply a rigid pose to a cloud's coordinates.

    Features, labels and timestamp are unchanged.
    """
    pose = check_pose(pose)
    return replace(cloud, coords=transform_coords(cloud.coords, pose))


def aggregate_frames(clouds, poses):
    """
    Transform sweeps to the world frame and concatenate them.

    Args:
        clouds: Sequence of PointCloud
        poses: One 4x4 pose per cloud

    Returns:
        AggregatedCloud with origin mapping
    """
    clouds, poses = list(clouds), list(poses)
    if len(clouds) != len(poses):
        raise GeometryError(
            'aggregate_frames needs one pose per cloud.',
            code='LENGTH_MISMATCH',
            details={'clouds': len(clouds), 'poses': len(poses)},
        )
    if not clouds:
        raise GeometryError('aggregate_frames needs at least one cloud.', code='EMPTY_INPUT')

    coords = [transform_to_global(cloud, pose).coords for cloud, pose in zip(clouds, poses)]
    sizes = tuple(len(cloud) for cloud in clouds)
    aggregated = AggregatedCloud(
        coords=np.concatenate(coords, axis=0),
        features=np.concatenate([cloud.features for cloud in clouds], axis=0),
        origin_frame=np.concatenate([np.full(size, frame, dtype=np.int64) for frame, size in enumerate(sizes)]),
        origin_index=np.concatenate([np.arange(size, dtype=np.int64) for size in sizes]),
        frame_sizes=sizes,
        gt_semantic=np.concatenate([cloud.gt_semantic for cloud in clouds]),
        gt_instance=np.concatenate([cloud.gt_instance for cloud in clouds]),
    )
    logger.debug('Aggregated %d frames into %d points', len(sizes), len(aggregated))
    return aggregated


def scatter_to_frames(aggregated, values, fill=0):
    """
    Split per-point aggregate values back into per-frame arrays.

    Returns:
        List with one array per source frame, indexed by origin_index
    """
    values = np.asarray(values)
    views = []
    for frame, size in enumerate(aggregated.frame_sizes):
        view = np.full((size,) + values.shape[1:], fill, dtype=values.dtype)
        mask = aggregated.origin_frame == frame
        view[aggregated.origin_index[mask]] = values[mask]
        views.append(view)
    return views


def split_by_origin(aggregated, poses):
    """Recover each sweep's LiDAR-frame coordinates from an aggregate."""
    views = scatter_to_frames(aggregated, aggregated.coords, fill=np.nan)
    return [transform_coords(view, invert_pose(check_pose(pose))) for view, pose in zip(views, poses)]


def perturb_extrinsics(extrinsics, translation_fraction, rotation_fraction, rng):
    """
    Calibration misalignment.

    Translation noise has norm ``translation_fraction * max(|t|, 1 m)`` in a
    random direction; rotation noise turns ``rotation_fraction * 180 deg``
    about a random axis.
    """
    extrinsics = check_pose(extrinsics)
    if translation_fraction < 0 or rotation_fraction < 0:
        raise GeometryError('Misalignment fractions must be non-negative.', code='BAD_MISALIGNMENT')

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    base = max(float(np.linalg.norm(extrinsics[:3, 3])), 1.0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rotation_fraction * math.pi

    noise = np.eye(4)
    noise[:3, :3] = Rotation.from_rotvec(axis * angle).as_matrix()
    noise[:3, 3] = direction * translation_fraction * base
    return noise @ extrinsics
