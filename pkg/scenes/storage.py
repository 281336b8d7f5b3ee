"""
On-disk dataset formats.

Point cloud file (``LADPC1``): u32 N, u32 L, u32 source_id, u32 timestamp,
then N*3 f32 coords, N*L f32 features, N u16 gt_semantic, N u32 gt_instance.

Camera frame file (``LADIM1``): u32 H, u32 W, H*W*3 f32 rgb, H*W u32 gt_mask,
9 f64 intrinsics, 16 f64 extrinsics (row-major).

The manifest is a JSON document listing sequences, their frames, poses
(16 f64 row-major each) and source profiles. Coordinates, features and rgb
are stored as f32, so reading returns the f32-rounded values.
"""

import logging
from pathlib import Path

import numpy as np
import orjson

from core.binio import BinaryReader, BinaryWriter, make_magic
from core.exceptions import DatasetFormatError
from core.utils import read_json, write_json

from .datatypes import CameraFrame, PointCloud, SceneSequence, SourceProfile


logger = logging.getLogger(__name__)

POINT_CLOUD_TAG = 'LADPC'
CAMERA_FRAME_TAG = 'LADIM'
MANIFEST_NAME = 'manifest.json'
MANIFEST_FORMAT = 'lad-dataset'
MANIFEST_VERSION = 1


# ============================================================================
# FRAME FILES
# ============================================================================

def encode_point_cloud(cloud):
    n, feature_dim = cloud.features.shape
    return (
        BinaryWriter(make_magic(POINT_CLOUD_TAG))
        .u32(n, feature_dim, cloud.source_id, cloud.timestamp)
        .array(cloud.coords, '<f4')
        .array(cloud.features, '<f4')
        .array(cloud.gt_semantic, '<u2')
        .array(cloud.gt_instance, '<u4')
        .getvalue()
    )


def decode_point_cloud(data, source=None):
    reader = BinaryReader(data, POINT_CLOUD_TAG, source=source)
    n, feature_dim, source_id, timestamp = reader.u32(4)
    cloud = PointCloud(
        coords=reader.array('f4', n * 3, (n, 3)).astype(np.float64),
        features=reader.array('f4', n * feature_dim, (n, feature_dim)).astype(np.float64),
        timestamp=timestamp,
        source_id=source_id,
        gt_semantic=reader.array('u2', n).astype(np.int64),
        gt_instance=reader.array('u4', n).astype(np.int64),
    )
    reader.expect_end()
    return cloud


def encode_camera_frame(frame):
    height, width = frame.gt_mask.shape
    return (
        BinaryWriter(make_magic(CAMERA_FRAME_TAG))
        .u32(height, width)
        .array(frame.rgb, '<f4')
        .array(frame.gt_mask, '<u4')
        .array(frame.intrinsics, '<f8')
        .array(frame.extrinsics, '<f8')
        .getvalue()
    )


def decode_camera_frame(data, frame_index, source=None):
    reader = BinaryReader(data, CAMERA_FRAME_TAG, source=source)
    height, width = reader.u32(2)
    frame = CameraFrame(
        rgb=reader.array('f4', height * width * 3, (height, width, 3)).astype(np.float64),
        gt_mask=reader.array('u4', height * width, (height, width)).astype(np.int64),
        intrinsics=reader.array('f8', 9, (3, 3)),
        extrinsics=reader.array('f8', 16, (4, 4)),
        frame_index=frame_index,
    )
    reader.expect_end()
    return frame


def write_point_cloud(cloud, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_point_cloud(cloud))
    return path


def read_point_cloud(path):
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f'{path} does not exist.', code=DatasetFormatError.MISSING_FRAME)
    return decode_point_cloud(path.read_bytes(), source=path)


def write_camera_frame(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_camera_frame(frame))
    return path


def read_camera_frame(path, frame_index):
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f'{path} does not exist.', code=DatasetFormatError.MISSING_FRAME)
    return decode_camera_frame(path.read_bytes(), frame_index, source=path)


# ============================================================================
# DATASET
# ============================================================================

def write_dataset(sequences, directory):
    """
    Write scene sequences and their manifest.

    Args:
        sequences: SceneSequence or list of SceneSequence
        directory: Output directory

    Returns:
        The manifest dict
    """
    if isinstance(sequences, SceneSequence):
        sequences = [sequences]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    manifest = {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'sequences': [],
        'source_profiles': {},
    }
    for sequence in sequences:
        profile = sequence.source_profile
        manifest['source_profiles'][str(profile.source_id)] = profile.to_dict()
        entry = {
            'scene_id': sequence.scene_id,
            'source_id': profile.source_id,
            'instance_classes': {str(k): v for k, v in sorted(sequence.instance_classes.items())},
            'frames': [],
        }
        for index, ((cloud, camera), pose) in enumerate(zip(sequence.frames, sequence.poses)):
            cloud_file = f'{sequence.scene_id}/pc_{index:06d}.bin'
            camera_file = f'{sequence.scene_id}/im_{index:06d}.bin'
            write_point_cloud(cloud, directory / cloud_file)
            write_camera_frame(camera, directory / camera_file)
            entry['frames'].append({
                'index': index,
                'timestamp': cloud.timestamp,
                'point_cloud': cloud_file,
                'camera': camera_file,
                'points': len(cloud),
                'pose': [float(v) for v in np.asarray(pose, dtype=np.float64).ravel()],
            })
        manifest['sequences'].append(entry)

    write_json(directory / MANIFEST_NAME, manifest)
    logger.info('Wrote %d sequences to %s', len(manifest['sequences']), directory)
    return manifest


def read_manifest(directory):
    """Read and check a dataset manifest."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise DatasetFormatError(
            f'{path} does not exist.',
            code=DatasetFormatError.MISSING_FRAME,
            details={'path': str(path)},
        )
    try:
        manifest = read_json(path)
    except orjson.JSONDecodeError as exc:
        raise DatasetFormatError(f'{path}: invalid JSON.', code=DatasetFormatError.MALFORMED_HEADER) from exc
    if not isinstance(manifest, dict) or manifest.get('format') != MANIFEST_FORMAT:
        raise DatasetFormatError(f'{path}: not a dataset manifest.', code=DatasetFormatError.MALFORMED_HEADER)
    if manifest.get('version') != MANIFEST_VERSION:
        raise DatasetFormatError(
            f'{path}: unsupported manifest version {manifest.get("version")}.',
            code=DatasetFormatError.VERSION_MISMATCH,
        )
    for key in ('sequences', 'source_profiles'):
        if key not in manifest:
            raise DatasetFormatError(f'{path}: missing "{key}".', code=DatasetFormatError.MALFORMED_HEADER)
    return manifest


def read_dataset(directory):
    """
    Read every sequence listed in a manifest.

    Returns:
        List of SceneSequence in manifest order
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    profiles = {int(key): SourceProfile.from_dict(value) for key, value in manifest['source_profiles'].items()}

    sequences = []
    for entry in manifest['sequences']:
        frames, poses = [], []
        for frame in entry['frames']:
            for key in ('point_cloud', 'camera'):
                if not (directory / frame[key]).exists():
                    raise DatasetFormatError(
                        f'Manifest references missing frame file {frame[key]}.',
                        code=DatasetFormatError.MISSING_FRAME,
                        details={'file': frame[key], 'scene_id': entry['scene_id']},
                    )
            cloud = read_point_cloud(directory / frame['point_cloud'])
            camera = read_camera_frame(directory / frame['camera'], frame['index'])
            frames.append((cloud, camera))
            poses.append(np.asarray(frame['pose'], dtype=np.float64).reshape(4, 4))
        sequences.append(SceneSequence(
            scene_id=entry['scene_id'],
            source_profile=profiles[int(entry['source_id'])],
            poses=poses,
            frames=frames,
            instance_classes={int(k): int(v) for k, v in entry.get('instance_classes', {}).items()},
        ))
    logger.info('Read %d sequences from %s', len(sequences), directory)
    return sequences
