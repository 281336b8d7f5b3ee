import logging
from collections import deque

import numpy as np

from core.exceptions import DegeneratePlaneError, GeometryError
from core.utils import STREAM_GEOSEG, rng_stream
from geometry.services import scatter_to_frames

from .datatypes import ClusterParams, PlaneModel, RansacParams, SegmentAssignment


logger = logging.getLogger(__name__)

# Hypotheses scored per vectorized batch; bounds the (batch, N) distance matrix.
HYPOTHESIS_BATCH = 16
BRUTE_CHUNK = 512
COLLINEAR_SINE = 1e-9
NEIGHBOR_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


def _as_points(points):
    coords = getattr(points, 'coords', points)
    return np.asarray(coords, dtype=np.float64).reshape(-1, 3)


# ============================================================================
# GROUND REMOVAL
# ============================================================================

def ransac_ground(points, iterations=200, inlier_threshold=0.05, seed=0):
    """
    Fit the ground plane with RANSAC.

    Args:
        points: (N, 3) array or PointCloud
        iterations: Number of 3-point hypotheses
        inlier_threshold: Max point-plane distance for an inlier (meters)
        seed: Run seed

    Returns:
        PlaneModel with the normal oriented towards +z
    """
    params = RansacParams(iterations=iterations, inlier_threshold=inlier_threshold, seed=seed)
    points = _as_points(points)
    n = len(points)
    if n < 3:
        raise GeometryError('RANSAC needs at least 3 points.', code='TOO_FEW_POINTS', details={'points': n})

    rng = rng_stream(params.seed, STREAM_GEOSEG, 0)
    samples = rng.integers(0, n, size=(params.iterations, 3))
    a, b, c = points[samples[:, 0]], points[samples[:, 1]], points[samples[:, 2]]
    ab, ac = b - a, c - a
    normals = np.cross(ab, ac)
    norms = np.linalg.norm(normals, axis=1)
    usable = norms > COLLINEAR_SINE * np.linalg.norm(ab, axis=1) * np.linalg.norm(ac, axis=1)
    usable &= norms > 0
    if not usable.any():
        raise DegeneratePlaneError(
            f'All {params.iterations} RANSAC samples were collinear.',
            details={'iterations': params.iterations, 'points': n},
        )
    normals[usable] /= norms[usable, None]
    offsets = -np.einsum('ij,ij->i', normals, a)

    counts = np.full(params.iterations, -1, dtype=np.int64)
    candidates = np.flatnonzero(usable)
    for start in range(0, len(candidates), HYPOTHESIS_BATCH):
        batch = candidates[start:start + HYPOTHESIS_BATCH]
        distances = np.abs(normals[batch] @ points.T + offsets[batch, None])
        counts[batch] = (distances <= params.inlier_threshold).sum(axis=1)

    best = int(np.argmax(counts))
    inliers = np.abs(points @ normals[best] + offsets[best]) <= params.inlier_threshold

    normal, offset = _refine_plane(points[inliers])
    if normal[2] < 0:
        normal, offset = -normal, -offset
    inliers = np.abs(points @ normal + offset) <= params.inlier_threshold

    logger.debug('RANSAC: hypothesis %d kept, %d/%d inliers', best, int(inliers.sum()), n)
    return PlaneModel(
        normal=normal,
        offset=float(offset),
        inlier_mask=inliers,
        inlier_threshold=params.inlier_threshold,
        best_iteration=best,
    )


def _refine_plane(points):
    """Least-squares plane through points: smallest right singular vector."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1] / np.linalg.norm(vt[-1])
    return normal, -float(normal @ centroid)


# ============================================================================
# DENSITY CLUSTERING
# ============================================================================

def _grid_neighbors(points, eps):
    """CSR radius-neighbor lists from a voxel hash grid of cell size eps."""
    n = len(points)
    cells = np.floor(points / eps).astype(np.int64)
    cells -= cells.min(axis=0) - 1
    dims = cells.max(axis=0) + 2
    keys = np.ravel_multi_index(cells.T, dims)
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]

    sources, targets = [], []
    for offset in NEIGHBOR_OFFSETS:
        neighbor_keys = np.ravel_multi_index((cells + offset).T, dims)
        start = np.searchsorted(sorted_keys, neighbor_keys, side='left')
        stop = np.searchsorted(sorted_keys, neighbor_keys, side='right')
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        source = np.repeat(np.arange(n), counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        target = order[np.repeat(start, counts) + within]
        close = ((points[source] - points[target]) ** 2).sum(axis=-1) <= eps * eps
        sources.append(source[close])
        targets.append(target[close])

    return _to_csr(n, np.concatenate(sources), np.concatenate(targets))


def _brute_neighbors(points, eps):
    """CSR radius-neighbor lists by exhaustive chunked comparison."""
    n = len(points)
    sources, targets = [], []
    for start in range(0, n, BRUTE_CHUNK):
        block = points[start:start + BRUTE_CHUNK]
        close = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1) <= eps * eps
        rows, cols = np.nonzero(close)
        sources.append(rows + start)
        targets.append(cols)
    return _to_csr(n, np.concatenate(sources), np.concatenate(targets))


def _to_csr(n, sources, targets):
    order = np.lexsort((targets, sources))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(sources, minlength=n), out=indptr[1:])
    return indptr, targets[order]


def _relabel_in_order(labels, min_size):
    """Drop clusters smaller than min_size and renumber the rest 1..M by first id."""
    sizes = np.bincount(labels)
    keep = sizes >= min_size
    keep[0] = False
    lookup = np.zeros(len(sizes), dtype=np.int64)
    lookup[keep] = np.arange(1, int(keep.sum()) + 1)
    return lookup[labels], int(keep.sum())


def density_cluster(points, eps=ClusterParams.eps, min_pts=ClusterParams.min_pts,
                    min_segment_size=ClusterParams.min_segment_size, index=ClusterParams.index):
    """
    DBSCAN over 3D points.

    Core points have at least ``min_pts`` neighbors within ``eps`` (the point
    itself included). Clusters are grown breadth-first from unvisited core
    points in index order, so labels follow first-contact order and a border
    point joins the first cluster that reaches it.

    Args:
        points: (N, 3) array or PointCloud
        eps: Neighborhood radius (meters)
        min_pts: Core point threshold
        min_segment_size: Smaller clusters are relabeled noise
        index: 'grid' (voxel hash, cell = eps) or 'brute'

    Returns:
        SegmentAssignment with noise labeled 0
    """
    params = ClusterParams(eps=eps, min_pts=min_pts, min_segment_size=min_segment_size, index=index)
    points = _as_points(points)
    n = len(points)
    if n == 0:
        return SegmentAssignment(labels=np.zeros(0, dtype=np.int64), segment_count=0)

    build = _grid_neighbors if params.index == 'grid' else _brute_neighbors
    indptr, indices = build(points, params.eps)
    core = np.diff(indptr) >= params.min_pts

    labels = np.zeros(n, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    cluster = 0
    for seed_point in range(n):
        if assigned[seed_point] or not core[seed_point]:
            continue
        cluster += 1
        assigned[seed_point] = True
        labels[seed_point] = cluster
        queue = deque([seed_point])
        while queue:
            current = queue.popleft()
            neighbors = indices[indptr[current]:indptr[current + 1]]
            fresh = neighbors[~assigned[neighbors]]
            assigned[fresh] = True
            labels[fresh] = cluster
            queue.extend(fresh[core[fresh]].tolist())

    labels, segment_count = _relabel_in_order(labels, params.min_segment_size)
    logger.debug('DBSCAN (%s): %d points -> %d segments, %d noise', params.index, n, segment_count,
                 int((labels == 0).sum()))
    return SegmentAssignment(labels=labels, segment_count=segment_count)


# ============================================================================
# SEGMENTATION PIPELINES
# ============================================================================

def segment_scan(points, ransac=None, cluster=None):
    """
    Ground removal followed by clustering of the non-ground points.

    Returns:
        SegmentAssignment over all input points; ground points are 0
    """
    ransac = ransac or RansacParams()
    cluster = cluster or ClusterParams()
    points = _as_points(points)

    plane = ransac_ground(points, ransac.iterations, ransac.inlier_threshold, ransac.seed)
    non_ground = np.flatnonzero(~plane.inlier_mask)
    clustered = density_cluster(points[non_ground], cluster.eps, cluster.min_pts, cluster.min_segment_size,
                                cluster.index)

    labels = np.zeros(len(points), dtype=np.int64)
    labels[non_ground] = clustered.labels
    return SegmentAssignment(labels=labels, segment_count=clustered.segment_count, ground_mask=plane.inlier_mask)


def segment_aggregate_and_map(aggregated, ransac=None, cluster=None):
    """
    Segment an aggregated multi-frame cloud and map labels back to each scan.

    Segment ids are shared by every per-frame view, so an id names the same
    physical cluster in all frames.
    """
    if len(aggregated) == 0:
        raise GeometryError('Cannot segment an empty aggregate.', code='EMPTY_INPUT')

    assignment = segment_scan(aggregated.coords, ransac, cluster)
    assignment.per_frame_views = scatter_to_frames(aggregated, assignment.labels, fill=0)
    logger.info(
        'Segmented aggregate of %d frames / %d points into %d segments',
        aggregated.num_frames, len(aggregated), assignment.segment_count,
    )
    return assignment


def frame_assignment(assignment, frame):
    """SegmentAssignment of one scan, taken from an aggregate's per-frame view."""
    labels = assignment.per_frame_views[frame]
    return SegmentAssignment(labels=labels, segment_count=assignment.segment_count)
