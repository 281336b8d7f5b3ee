"""
Training inputs: per-frame superpixels, aggregate segments and the cached
per-frame samples the optimizer iterates over.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.exceptions import ConfigurationError
from core.utils import STREAM_MISALIGN, STREAM_SUPERPIXELS, ordered_map, rng_stream, run_validators
from core.validators import validate_choice, validate_positive, validate_range
from geometry.datatypes import ProjectionBatch
from geometry.services import aggregate_frames, perturb_extrinsics, project_coords
from geoseg.services import segment_aggregate_and_map
from superpixels.services import (
    group_superpoints,
    noisy_semantic_superpixels,
    semantic_superpixels_from_mask,
    slic_superpixels,
)


logger = logging.getLogger(__name__)

SUPERPIXEL_MODES = ('semantic', 'slic', 'noisy', 'file')


@dataclass(frozen=True)
class SuperpixelParams:
    mode: str = 'semantic'
    target_count: int = 48
    compactness: float = 10.0
    iterations: int = 10
    split_prob: float = 0.3

    def __post_init__(self):
        run_validators(self.mode, [validate_choice(SUPERPIXEL_MODES, 'superpixels.mode')])
        run_validators(self.target_count, [validate_range(1, None, 'superpixels.target_count')])
        run_validators(self.compactness, [validate_positive('superpixels.compactness')])
        run_validators(self.iterations, [validate_range(1, None, 'superpixels.iterations')])
        run_validators(self.split_prob, [validate_range(0, 1, 'superpixels.split_prob')])


def compute_superpixels(sequence, params, seed=0, slic=False):
    """
    One SuperpixelMap per frame of a sequence.

    ``slic=True`` forces SLIC maps whatever the configured mode.
    """
    mode = 'slic' if slic else params.mode
    maps = []
    for index, (_, camera) in enumerate(sequence):
        if mode == 'slic':
            maps.append(slic_superpixels(camera.rgb, params.target_count, params.compactness, params.iterations))
        elif mode == 'noisy':
            frame_seed = int(rng_stream(seed, STREAM_SUPERPIXELS, sequence.source_id, index).integers(2 ** 31))
            maps.append(noisy_semantic_superpixels(camera.gt_mask, params.split_prob, frame_seed))
        elif mode == 'semantic':
            maps.append(semantic_superpixels_from_mask(camera.gt_mask))
        else:
            raise ConfigurationError(
                "Superpixel mode 'file' reads maps from disk; run the superpixel stage first.",
                code='SUPERPIXELS_FROM_FILE',
            )
    return maps


def compute_segments(sequence, ransac=None, cluster=None):
    """Segment the aggregate of a sequence's frames; ids are shared across frames."""
    aggregated = aggregate_frames(sequence.clouds(), sequence.poses)
    return segment_aggregate_and_map(aggregated, ransac, cluster)


@dataclass
class FrameSample:
    """
    The points of one frame that take part in any loss, ready for the encoder.

    ``cloud`` holds source-normalized features; ``voxels`` caches the voxel
    index of its coordinates; ``image`` is the frozen image feature grid.
    """

    source_id: int
    cloud: object
    voxels: tuple
    image: object
    superpixels: object
    groups: object
    segments: np.ndarray

    @property
    def point_classes(self):
        return self.cloud.gt_semantic


@dataclass
class TrainingScene:
    scene_id: str
    source_id: int
    frames: list

    def __len__(self):
        return len(self.frames)


def build_frame_sample(model, cloud, camera, superpixel_map, segment_labels, semantic_mask=None, extrinsics=None):
    """
    Keep the points that belong to a superpoint or a segment.

    Points outside every superpoint and segment carry no loss; voxel
    neighborhoods are taken within the kept points.
    """
    extrinsics = camera.extrinsics if extrinsics is None else extrinsics
    projections = project_coords(cloud.coords, camera.intrinsics, extrinsics, camera.height, camera.width)
    covered = group_superpoints(projections, superpixel_map).point_labels() > 0
    active = np.flatnonzero(covered | (np.asarray(segment_labels) > 0))

    subset = model.prepare(cloud.subset(active))
    sub_projections = ProjectionBatch(
        pixels=projections.pixels[active],
        depth=projections.depth[active],
        valid=projections.valid[active],
        height=projections.height,
        width=projections.width,
    )
    return FrameSample(
        source_id=cloud.source_id,
        cloud=subset,
        voxels=model.encoder.voxels(subset.coords),
        image=model.image_features(camera, semantic_mask),
        superpixels=superpixel_map,
        groups=group_superpoints(sub_projections, superpixel_map),
        segments=np.asarray(segment_labels, dtype=np.int64)[active],
    )


def build_training_scenes(model, sequences, superpixel_maps, segment_assignments, misalign=None, seed=0,
                          threads=None):
    """
    Args:
        model: PointModel with fitted source stats
        sequences: SceneSequence list
        superpixel_maps: Per sequence, one SuperpixelMap per frame
        segment_assignments: Per sequence, SegmentAssignment with per-frame views
        misalign: Optional (translation_fraction, rotation_fraction)
        seed: Run seed (misalignment noise)

    Returns:
        List of TrainingScene in input order
    """
    if misalign is not None:
        for fraction in misalign:
            run_validators(fraction, [validate_range(0, 1, 'misalign')])

    def build(index):
        sequence = sequences[index]
        frames = []
        for frame_index, (cloud, camera) in enumerate(sequence):
            extrinsics = None
            if misalign is not None and any(misalign):
                rng = rng_stream(seed, STREAM_MISALIGN, index, frame_index)
                extrinsics = perturb_extrinsics(camera.extrinsics, misalign[0], misalign[1], rng)
            frames.append(build_frame_sample(
                model,
                cloud,
                camera,
                superpixel_maps[index][frame_index],
                segment_assignments[index].per_frame_views[frame_index],
                sequence.semantic_mask(frame_index),
                extrinsics,
            ))
        return TrainingScene(scene_id=sequence.scene_id, source_id=sequence.source_id, frames=frames)

    scenes = ordered_map(build, range(len(sequences)), threads)
    logger.info('Prepared %d training scenes', len(scenes))
    return scenes
