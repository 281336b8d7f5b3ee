"""
Cosine-similarity maps, sensor corruptions and the robustness summary.
"""

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from core.exceptions import ConfigurationError
from core.utils import STREAM_CORRUPT, rng_stream, run_validators
from core.validators import validate_choice, validate_range
from scenes.datatypes import SceneSequence


logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ('beam_drop', 'jitter', 'intensity_shift')
SEVERITIES = (1, 2, 3)
BEAM_DROP_FRACTIONS = {1: 0.25, 2: 0.5, 3: 0.75}
JITTER_SIGMAS = {1: 0.02, 2: 0.05, 3: 0.10}
INTENSITY_FACTORS = {1: 1.25, 2: 1.5, 3: 2.0}
RING_RESOLUTION_DEG = 0.01


# ============================================================================
# COSINE MAPS
# ============================================================================

def cosine_map(model, cloud, query_index):
    """Cosine similarity of every point's head embedding to the query point's."""
    if not 0 <= query_index < len(cloud):
        raise ConfigurationError(
            f'Query index {query_index} is outside a cloud of {len(cloud)} points.',
            code='BAD_QUERY_INDEX',
        )
    embeddings = model.point_embeddings(cloud)
    return np.clip(embeddings @ embeddings[query_index], -1.0, 1.0)


def write_cosine_map(path, cloud, similarity):
    """CSV sidecar: x, y, z, similarity, gt_semantic, gt_instance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([cloud.coords, similarity, cloud.gt_semantic, cloud.gt_instance])
    np.savetxt(path, table, fmt=['%.6f', '%.6f', '%.6f', '%.6f', '%d', '%d'], delimiter=',',
               header='x,y,z,similarity,gt_semantic,gt_instance', comments='')
    return path


def instance_similarity(embeddings, instances):
    """
    Mean pairwise cosine similarity within and across ground-truth instances.

    Points with instance 0 are left out; self-pairs are excluded.

    Returns:
        Tuple of (same-instance mean, cross-instance mean)
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    instances = np.asarray(instances, dtype=np.int64)
    keep = instances > 0
    embeddings, instances = embeddings[keep], instances[keep]
    _, inverse, sizes = np.unique(instances, return_inverse=True, return_counts=True)
    sums = np.zeros((len(sizes), embeddings.shape[1]))
    np.add.at(sums, inverse, embeddings)

    total = float(np.sum(embeddings.sum(axis=0) ** 2))
    within = float(np.sum(sums ** 2))
    self_pairs = float(np.sum(embeddings ** 2))
    within_pairs = float(np.sum(sizes.astype(np.float64) ** 2)) - len(embeddings)
    cross_pairs = float(len(embeddings)) ** 2 - float(np.sum(sizes.astype(np.float64) ** 2))
    same = (within - self_pairs) / within_pairs if within_pairs > 0 else float('nan')
    cross = (total - within) / cross_pairs if cross_pairs > 0 else float('nan')
    return same, cross


# ============================================================================
# CORRUPTIONS
# ============================================================================

def ring_ids(coords, resolution_deg=RING_RESOLUTION_DEG):
    """Elevation ring per point, from the elevation angle rounded to ``resolution_deg``."""
    coords = np.asarray(coords, dtype=np.float64)
    elevation = np.degrees(np.arctan2(coords[:, 2], np.hypot(coords[:, 0], coords[:, 1])))
    _, rings = np.unique(np.round(elevation / resolution_deg).astype(np.int64), return_inverse=True)
    return rings.reshape(-1)


def corrupt(cloud, kind, severity, seed=0):
    """
    Corrupted copy of a sensor-frame cloud; ground truth is carried unchanged.

    ``intensity_shift`` multiplies feature channel 0 (intensity) by 1.25,
    1.5 or 2.0 and leaves every other channel, including the elevation
    channel, untouched. Intensity may leave the source's range.

    Args:
        cloud: PointCloud in its LiDAR frame
        kind: 'beam_drop', 'jitter' or 'intensity_shift'
        severity: 1, 2 or 3
        seed: Run seed

    Returns:
        PointCloud
    """
    run_validators(kind, [validate_choice(CORRUPTION_KINDS, 'corruption kind')])
    run_validators(severity, [validate_choice(SEVERITIES, 'severity')])
    rng = rng_stream(seed, STREAM_CORRUPT, CORRUPTION_KINDS.index(kind), severity, cloud.timestamp)

    if kind == 'beam_drop':
        rings = ring_ids(cloud.coords)
        count = int(rings.max()) + 1 if len(rings) else 0
        dropped = rng.choice(count, size=int(round(BEAM_DROP_FRACTIONS[severity] * count)), replace=False)
        return cloud.subset(np.flatnonzero(~np.isin(rings, dropped)))

    if kind == 'jitter':
        noise = rng.normal(0.0, JITTER_SIGMAS[severity], size=cloud.coords.shape)
        return replace(cloud, coords=cloud.coords + noise)

    features = cloud.features.copy()
    features[:, 0] *= INTENSITY_FACTORS[severity]
    return replace(cloud, features=features)


def corrupt_sequences(sequences, kind, severity, seed=0):
    """Corrupt every cloud of every sequence; cameras and poses are kept."""
    corrupted = []
    for index, sequence in enumerate(sequences):
        frames = [
            (corrupt(cloud, kind, severity, rng_stream(seed, STREAM_CORRUPT, index).integers(2 ** 31)), camera)
            for cloud, camera in sequence
        ]
        corrupted.append(SceneSequence(
            scene_id=sequence.scene_id,
            source_profile=sequence.source_profile,
            poses=sequence.poses,
            frames=frames,
            instance_classes=sequence.instance_classes,
        ))
    logger.info('Applied %s severity %d to %d sequences', kind, severity, len(corrupted))
    return corrupted


def robustness_summary(clean_miou, corrupted, baseline):
    """
    Mean corruption error and mean resilience rate.

    Args:
        clean_miou: mIoU of the model on clean data
        corrupted: {(kind, severity): mIoU} of the model
        baseline: {(kind, severity): mIoU} of the reference (random-init) probe

    Returns:
        dict with per-kind CE, mCE and mRR
    """
    run_validators(clean_miou, [validate_range(0, 1, 'clean_miou')])
    errors = {}
    for kind in sorted({kind for kind, _ in corrupted}):
        severities = sorted(s for k, s in corrupted if k == kind)
        model_error = sum(1.0 - corrupted[(kind, s)] for s in severities)
        baseline_error = sum(1.0 - baseline[(kind, s)] for s in severities)
        errors[kind] = model_error / baseline_error if baseline_error > 0 else float('nan')
    resilience = [value / clean_miou for value in corrupted.values()] if clean_miou > 0 else []
    return {
        'ce': errors,
        'mce': float(np.mean(list(errors.values()))) if errors else float('nan'),
        'mrr': float(np.mean(resilience)) if resilience else float('nan'),
    }
