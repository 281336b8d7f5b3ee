"""
Scene and sensor data types.

Coordinates are meters, angles radians. Poses are 4x4 rigid transforms
mapping the LiDAR (ego) frame to the world frame. The world ground plane is
z = 0 and carries semantic class 0 and instance 0.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from core.exceptions import SceneSpecError
from core.utils import run_validators
from core.validators import (
    validate_choice,
    validate_finite,
    validate_intrinsics,
    validate_range,
    validate_rigid_transform,
    validate_shape,
)


GROUND_CLASS = 0
OBJECT_KINDS = ('box', 'cylinder')


@dataclass(frozen=True)
class SourceProfile:
    """One LiDAR source: intensity scale, beam count and point dropout."""

    source_id: int
    intensity_range: tuple = (0.0, 255.0)
    beam_count: int = 32
    dropout_rate: float = 0.0
    name: str = ''

    def __post_init__(self):
        low, high = self.intensity_range
        if not high > low:
            raise SceneSpecError(
                'intensity_range high must exceed low.',
                code='BAD_INTENSITY_RANGE',
                details={'intensity_range': self.intensity_range},
            )
        run_validators(self.dropout_rate, [
            validate_range(0.0, 1.0, name='dropout_rate', inclusive_max=False),
        ], SceneSpecError)
        if self.beam_count < 1:
            raise SceneSpecError('beam_count must be at least 1.', code='BAD_BEAM_COUNT')

    def to_dict(self):
        return {
            'source_id': self.source_id,
            'intensity_range': list(self.intensity_range),
            'beam_count': self.beam_count,
            'dropout_rate': self.dropout_rate,
            'name': self.name,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            source_id=int(data['source_id']),
            intensity_range=tuple(float(v) for v in data['intensity_range']),
            beam_count=int(data['beam_count']),
            dropout_rate=float(data['dropout_rate']),
            name=data.get('name', ''),
        )


@dataclass(frozen=True)
class ObjectSpec:
    """
    A box (axis-aligned) or vertical cylinder.

    ``size`` is the full extent (x, y, z); a cylinder uses size[0] / 2 as its
    radius. ``center`` is the world-frame center at frame 0 and ``velocity``
    moves it per frame.
    """

    kind: str
    center: tuple
    size: tuple
    semantic_class: int
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        run_validators(self.kind, [validate_choice(OBJECT_KINDS, name='kind')], SceneSpecError)
        if self.semantic_class < 1:
            raise SceneSpecError(
                'Object class ids must be >= 1 (0 is ground).',
                code='BAD_CLASS_ID',
                details={'semantic_class': self.semantic_class},
            )
        if min(self.size) <= 0:
            raise SceneSpecError('Object sizes must be positive.', code='BAD_OBJECT_SIZE')

    def center_at(self, frame_index):
        return np.asarray(self.center, dtype=np.float64) + frame_index * np.asarray(self.velocity, dtype=np.float64)

    @property
    def is_static(self):
        return not any(self.velocity)


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera rigidly attached to the LiDAR."""

    intrinsics: np.ndarray
    height: int
    width: int
    extrinsics: np.ndarray

    def __post_init__(self):
        run_validators(self.intrinsics, [validate_intrinsics], SceneSpecError)
        run_validators(self.extrinsics, [validate_rigid_transform(1e-9)], SceneSpecError)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to synthesize one multi-frame scene."""

    rng_seed: int
    objects: tuple
    ground_extent: float
    ego_trajectory: tuple
    beam_elevations: tuple
    azimuth_count: int
    camera: CameraSpec
    source_profile: SourceProfile
    num_frames: int = 2
    scene_id: str = 'scene_000'
    max_range: float = 80.0

    def __post_init__(self):
        if self.num_frames < 2:
            raise SceneSpecError('num_frames must be at least 2.', code='BAD_FRAME_COUNT')
        if self.azimuth_count < 8:
            raise SceneSpecError('azimuth_count must be at least 8.', code='BAD_AZIMUTH_COUNT')
        if len(self.ego_trajectory) != self.num_frames:
            raise SceneSpecError(
                'ego_trajectory needs one pose per frame.',
                code='BAD_TRAJECTORY',
                details={'poses': len(self.ego_trajectory), 'num_frames': self.num_frames},
            )
        for pose in self.ego_trajectory:
            run_validators(pose, [validate_rigid_transform(1e-9)], SceneSpecError)
        if not self.objects and self.ground_extent <= 0:
            raise SceneSpecError(
                'Scene has no objects and no ground.',
                code='DEGENERATE_SCENE',
            )
        if not self.beam_elevations:
            raise SceneSpecError('beam_elevations must not be empty.', code='BAD_BEAMS')

    def instance_classes(self):
        """Instance id -> semantic class; instance ids start at 1."""
        return {index + 1: obj.semantic_class for index, obj in enumerate(self.objects)}


@dataclass
class PointCloud:
    """One LiDAR sweep in its sensor frame (or the world frame after transform)."""

    coords: np.ndarray
    features: np.ndarray
    timestamp: int
    source_id: int
    gt_semantic: np.ndarray
    gt_instance: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.coords), -1)
        self.gt_semantic = np.asarray(self.gt_semantic, dtype=np.int64)
        self.gt_instance = np.asarray(self.gt_instance, dtype=np.int64)
        run_validators(self.coords, [lambda v: validate_finite(v, 'coords')], SceneSpecError)
        run_validators(self.features, [lambda v: validate_finite(v, 'features')], SceneSpecError)
        n = len(self.coords)
        if len(self.gt_semantic) != n or len(self.gt_instance) != n:
            raise SceneSpecError(
                'Ground-truth arrays must match the point count.',
                code='BAD_POINT_CLOUD',
                details={'points': n, 'semantic': len(self.gt_semantic), 'instance': len(self.gt_instance)},
            )

    def __len__(self):
        return len(self.coords)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        """Return a cloud with the selected points, in the given order."""
        return replace(
            self,
            coords=self.coords[indices],
            features=self.features[indices],
            gt_semantic=self.gt_semantic[indices],
            gt_instance=self.gt_instance[indices],
        )


@dataclass
class CameraFrame:
    """Rendered RGB image, the instance-id oracle mask and calibration."""

    rgb: np.ndarray
    gt_mask: np.ndarray
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.gt_mask = np.asarray(self.gt_mask, dtype=np.int64)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        run_validators(self.rgb, [validate_shape(None, None, 3, name='rgb')], SceneSpecError)
        run_validators(self.gt_mask, [validate_shape(*self.rgb.shape[:2], name='gt_mask')], SceneSpecError)
        run_validators(self.intrinsics, [validate_intrinsics], SceneSpecError)
        run_validators(self.extrinsics, [validate_rigid_transform(1e-9)], SceneSpecError)

    @property
    def height(self):
        return self.gt_mask.shape[0]

    @property
    def width(self):
        return self.gt_mask.shape[1]


@dataclass
class SceneSequence:
    """
    Frames of one scene from one source.

    Iterating yields (PointCloud, CameraFrame) pairs in frame order.
    """

    scene_id: str
    source_profile: SourceProfile
    poses: list
    frames: list
    instance_classes: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, index):
        return self.frames[index]

    @property
    def source_id(self):
        return self.source_profile.source_id

    def clouds(self):
        return [cloud for cloud, _ in self.frames]

    def semantic_mask(self, frame_index):
        """Camera mask converted from instance ids to semantic class ids."""
        mask = self.frames[frame_index][1].gt_mask
        lookup = np.zeros(max([0, *self.instance_classes]) + 1, dtype=np.int64)
        for instance, semantic in self.instance_classes.items():
            lookup[instance] = semantic
        return lookup[mask]
