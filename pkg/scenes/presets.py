"""
Built-in source profiles, camera rig and the default synthetic corpus.

Source A mimics a 32-beam sensor with 0-255 intensities, source B a 64-beam
sensor with 0-1 intensities.
"""

import math

import numpy as np

from core.utils import STREAM_SYNTH, rng_stream

from .datatypes import CameraSpec, ObjectSpec, SceneSpec, SourceProfile


SOURCE_A = SourceProfile(source_id=1, intensity_range=(0.0, 255.0), beam_count=32, dropout_rate=0.0, name='A')
SOURCE_B = SourceProfile(source_id=2, intensity_range=(0.0, 1.0), beam_count=64, dropout_rate=0.0, name='B')
DEFAULT_SOURCES = {'A': SOURCE_A, 'B': SOURCE_B}

SENSOR_HEIGHT = 1.8
LOWEST_ELEVATION = math.radians(-25.0)
HIGHEST_ELEVATION = math.radians(2.0)

# LiDAR x (forward) -> camera z, LiDAR y (left) -> camera -x, LiDAR z (up) -> camera -y.
LIDAR_TO_CAMERA = np.array([
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
])

# (kind, size, center height, class id, count)
OBJECT_LAYOUT = (
    ('box', (4.2, 1.8, 1.5), 0.75, 1, 2),      # vehicle
    ('cylinder', (0.5, 0.5, 4.0), 2.0, 2, 2),  # pole
    ('box', (8.0, 3.0, 6.0), 3.0, 3, 1),       # building
    ('box', (3.0, 0.6, 1.0), 0.5, 4, 2),       # barrier
)
CLASS_NAMES = {0: 'ground', 1: 'vehicle', 2: 'pole', 3: 'building', 4: 'barrier'}


def beam_elevations(beam_count, lowest=LOWEST_ELEVATION, highest=HIGHEST_ELEVATION):
    """Evenly spaced beam elevations in radians, lowest first."""
    if beam_count == 1:
        return (lowest,)
    return tuple(float(v) for v in np.linspace(lowest, highest, beam_count))


def default_camera(height=48, width=96, horizontal_fov=math.radians(90.0)):
    """Forward-looking pinhole camera co-located with the LiDAR."""
    focal = (width / 2.0) / math.tan(horizontal_fov / 2.0)
    intrinsics = np.array([
        [focal, 0.0, (width - 1) / 2.0],
        [0.0, focal, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraSpec(intrinsics=intrinsics, height=height, width=width, extrinsics=LIDAR_TO_CAMERA.copy())


def pose_matrix(x=0.0, y=0.0, z=SENSOR_HEIGHT, yaw=0.0):
    """Rigid pose with a rotation about the world z axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([
        [c, -s, 0.0, x],
        [s, c, 0.0, y],
        [0.0, 0.0, 1.0, z],
        [0.0, 0.0, 0.0, 1.0],
    ])


def straight_trajectory(num_frames, step=1.0, yaw=0.0, start=(0.0, 0.0)):
    """Ego moving `step` meters per frame along its heading."""
    return tuple(
        pose_matrix(start[0] + t * step * math.cos(yaw), start[1] + t * step * math.sin(yaw), SENSOR_HEIGHT, yaw)
        for t in range(num_frames)
    )


def place_objects(rng, dynamic_fraction=0.0, min_gap=1.0):
    """
    Place the default object layout in front of the ego without footprint
    overlaps.
    """
    placed = []
    for kind, size, center_z, semantic_class, count in OBJECT_LAYOUT:
        for _ in range(count):
            for _attempt in range(200):
                if semantic_class == 3:
                    x = rng.uniform(12.0, 30.0)
                    y = rng.choice([-1.0, 1.0]) * rng.uniform(9.0, 13.0)
                else:
                    x = rng.uniform(7.0, 28.0)
                    y = rng.uniform(-0.6, 0.6) * x
                radius = 0.5 * math.hypot(size[0], size[1])
                if all(math.hypot(x - other.center[0], y - other.center[1])
                       > radius + 0.5 * math.hypot(other.size[0], other.size[1]) + min_gap
                       for other in placed) and abs(y) > radius + 1.0:
                    break
            velocity = (0.0, 0.0, 0.0)
            if semantic_class == 1 and rng.random() < dynamic_fraction:
                velocity = (float(rng.uniform(0.5, 1.5)), 0.0, 0.0)
            placed.append(ObjectSpec(
                kind=kind,
                center=(float(x), float(y), center_z),
                size=size,
                semantic_class=semantic_class,
                velocity=velocity,
            ))
    return tuple(placed)


def default_scene_spec(seed, source_profile, scene_index=0, num_frames=2, azimuth_count=720,
                       camera=None, dynamic_fraction=0.0, ground_extent=60.0):
    """Randomized scene for one source; fully determined by the arguments."""
    rng = rng_stream(seed, STREAM_SYNTH, source_profile.source_id, scene_index, 1000)
    yaw = float(rng.uniform(-0.05, 0.05))
    return SceneSpec(
        rng_seed=int(seed) * 1000 + scene_index,
        objects=place_objects(rng, dynamic_fraction=dynamic_fraction),
        ground_extent=ground_extent,
        ego_trajectory=straight_trajectory(num_frames, step=1.0, yaw=yaw),
        beam_elevations=beam_elevations(source_profile.beam_count),
        azimuth_count=azimuth_count,
        camera=camera or default_camera(),
        source_profile=source_profile,
        num_frames=num_frames,
        scene_id=f'{source_profile.name or source_profile.source_id}_scene_{scene_index:03d}',
    )


def default_corpus_specs(seed, sources=None, scenes_per_source=10, num_frames=2, **kwargs):
    """SceneSpecs of the default corpus, keyed by source name."""
    sources = sources or DEFAULT_SOURCES
    return {
        name: [default_scene_spec(seed, profile, index, num_frames=num_frames, **kwargs)
               for index in range(scenes_per_source)]
        for name, profile in sources.items()
    }
