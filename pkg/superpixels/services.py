import logging

import numpy as np
from scipy import ndimage

from core.exceptions import ConfigurationError, GeometryError
from core.utils import STREAM_SUPERPIXELS, rng_stream, run_validators
from core.validators import validate_positive
from geometry.services import pixel_indices

from .datatypes import KIND_SEMANTIC, KIND_SLIC, SuperpixelMap, SuperpointGroups


logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def densify_labels(labels):
    """
    Relabel non-zero ids to 1..M in ascending order of the original id.

    Returns:
        Tuple of (dense labels, segment count, {original id: dense id})
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels[labels > 0])
    lookup = np.zeros(int(present.max()) + 1 if present.size else 1, dtype=np.int64)
    lookup[present] = np.arange(1, len(present) + 1)
    dense = lookup[labels]
    remap = {int(original): int(new) for original, new in zip(present, range(1, len(present) + 1))}
    return dense, len(present), remap


def _grid_shape(target_count, height, width):
    """Rows x cols with rows * cols == target_count and cells closest to square."""
    best = None
    for rows in range(1, target_count + 1):
        if target_count % rows:
            continue
        cols = target_count // rows
        if rows > height or cols > width:
            continue
        score = abs(np.log((width / cols) / (height / rows)))
        if best is None or score < best[0]:
            best = (score, rows, cols)
    if best is None:
        rows = min(height, max(1, int(round(np.sqrt(target_count * height / width)))))
        return rows, min(width, int(np.ceil(target_count / rows)))
    return best[1], best[2]


def slic_superpixels(rgb, target_count, compactness=10.0, iterations=10):
    """
    SLIC-style superpixels in (RGB, x/S, y/S) space.

    Args:
        rgb: (H, W, 3) image with values in [0, 1]
        target_count: Number of grid seeds
        compactness: Weight of spatial distance relative to color distance
        iterations: k-means iterations

    Returns:
        SuperpixelMap (kind 'slic') with every pixel labeled
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    height, width = rgb.shape[:2]
    if target_count < 1 or iterations < 1:
        raise ConfigurationError(
            'target_count and iterations must be at least 1.',
            code='BAD_SLIC_PARAMS',
            details={'target_count': target_count, 'iterations': iterations},
        )
    if target_count > height * width:
        raise ConfigurationError(
            f'target_count {target_count} exceeds the pixel count {height * width}.',
            code='TOO_MANY_SEGMENTS',
        )
    run_validators(compactness, [validate_positive('compactness')])

    rows, cols = _grid_shape(target_count, height, width)
    step_y, step_x = height / rows, width / cols
    scale = np.sqrt(step_y * step_x)

    grid_y, grid_x = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing='ij')
    pixel_y, pixel_x = grid_y.ravel(), grid_x.ravel()
    pixel_color = rgb.reshape(-1, 3)

    center_y = np.repeat((np.arange(rows) + 0.5) * step_y - 0.5, cols)
    center_x = np.tile((np.arange(cols) + 0.5) * step_x - 0.5, rows)
    seed_index = np.round(center_y).astype(np.int64) * width + np.round(center_x).astype(np.int64)
    center_color = pixel_color[seed_index].copy()
    count = len(center_y)

    assignment = np.zeros(len(pixel_color), dtype=np.int64)
    for _ in range(iterations):
        dy = pixel_y[:, None] - center_y[None, :]
        dx = pixel_x[:, None] - center_x[None, :]
        color_distance = ((pixel_color[:, None, :] - center_color[None, :, :]) ** 2).sum(axis=2)
        distance = color_distance + compactness ** 2 * (dy * dy + dx * dx) / scale ** 2

        local = np.where((np.abs(dy) <= 2 * step_y) & (np.abs(dx) <= 2 * step_x), distance, np.inf)
        orphaned = ~np.isfinite(local.min(axis=1))
        local[orphaned] = distance[orphaned]
        assignment = np.argmin(local, axis=1)

        members = np.bincount(assignment, minlength=count)
        filled = members > 0
        center_y[filled] = np.bincount(assignment, pixel_y, count)[filled] / members[filled]
        center_x[filled] = np.bincount(assignment, pixel_x, count)[filled] / members[filled]
        for channel in range(3):
            center_color[filled, channel] = (
                np.bincount(assignment, pixel_color[:, channel], count)[filled] / members[filled]
            )

    labels = enforce_connectivity(assignment.reshape(height, width) + 1)
    dense, segment_count, _ = densify_labels(labels)
    logger.debug('SLIC: %d seeds -> %d segments', count, segment_count)
    return SuperpixelMap(labels=dense, segment_count=segment_count, kind=KIND_SLIC)


def enforce_connectivity(labels):
    """
    Merge disconnected fragments into the dominant neighboring segment.

    Each label keeps its largest 4-connected component; every other
    component joins the adjacent label sharing the most boundary pixels
    (lowest label on ties).
    """
    labels = np.array(labels, dtype=np.int64)
    pending = np.zeros(labels.shape, dtype=bool)
    for label in np.unique(labels[labels > 0]):
        components, found = ndimage.label(labels == label, structure=FOUR_CONNECTED)
        if found <= 1:
            continue
        sizes = np.bincount(components.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        pending |= (components > 0) & (components != keep)

    while pending.any():
        components, found = ndimage.label(pending, structure=FOUR_CONNECTED)
        progressed = False
        for component in range(1, found + 1):
            region = components == component
            ring = ndimage.binary_dilation(region, structure=FOUR_CONNECTED) & ~region & ~pending
            neighbours = labels[ring]
            neighbours = neighbours[neighbours > 0]
            if neighbours.size == 0:
                continue
            votes = np.bincount(neighbours)
            labels[region] = int(np.argmax(votes))
            pending[region] = False
            progressed = True
        if not progressed:
            # Fragments with no settled neighbour keep their own label.
            break
    return labels


def semantic_superpixels_from_mask(gt_mask):
    """
    Turn an instance mask into a semantic superpixel map.

    Each distinct non-zero id becomes one segment, relabeled 1..M_v.
    """
    dense, segment_count, remap = densify_labels(gt_mask)
    return SuperpixelMap(labels=dense, segment_count=segment_count, kind=KIND_SEMANTIC, remap=remap)


def noisy_semantic_superpixels(gt_mask, split_prob=0.3, seed=0):
    """
    Over-segmented oracle: each segment is cut in two at its median column
    with probability ``split_prob``.
    """
    rng = rng_stream(seed, STREAM_SUPERPIXELS, 1)
    base = semantic_superpixels_from_mask(gt_mask)
    labels = base.labels.copy()
    next_label = base.segment_count + 1
    for segment in range(1, base.segment_count + 1):
        if rng.random() >= split_prob:
            continue
        rows, cols = np.nonzero(base.labels == segment)
        cut = np.median(cols)
        right = cols > cut
        if right.any() and (~right).any():
            labels[rows[right], cols[right]] = next_label
            next_label += 1
    dense, segment_count, _ = densify_labels(labels)
    return SuperpixelMap(labels=dense, segment_count=segment_count, kind=KIND_SEMANTIC)


def group_superpoints(projections, superpixel_map):
    """
    Group points by the superpixel under their rounded projection.

    Args:
        projections: ProjectionBatch of one frame
        superpixel_map: SuperpixelMap of the same frame

    Returns:
        SuperpointGroups; points that are invalid or land on label 0 are
        uncovered
    """
    if superpixel_map.labels.shape != (projections.height, projections.width):
        raise GeometryError(
            'Superpixel map and projections disagree on image size.',
            code='SHAPE_MISMATCH',
            details={'map': superpixel_map.labels.shape, 'image': (projections.height, projections.width)},
        )

    rows, cols = pixel_indices(projections)
    point_labels = np.zeros(len(projections), dtype=np.int64)
    valid = projections.valid
    point_labels[valid] = superpixel_map.labels[rows[valid], cols[valid]]

    order = np.argsort(point_labels, kind='stable')
    sorted_labels = point_labels[order]
    boundaries = np.searchsorted(sorted_labels, np.arange(superpixel_map.segment_count + 2))
    groups = {}
    empty = []
    for segment in range(1, superpixel_map.segment_count + 1):
        members = order[boundaries[segment]:boundaries[segment + 1]]
        if members.size:
            groups[segment] = members
        else:
            empty.append(segment)

    return SuperpointGroups(
        groups=groups,
        uncovered_points=np.sort(order[:boundaries[1]]),
        empty_segments=empty,
        point_count=len(projections),
    )
