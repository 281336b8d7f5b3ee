from dataclasses import dataclass

import numpy as np

from core.utils import run_validators
from core.validators import validate_choice, validate_positive, validate_range


NEIGHBOR_INDEXES = ('grid', 'brute')


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        run_validators(self.iterations, [validate_range(1, None, 'ransac.iterations')])
        run_validators(self.inlier_threshold, [validate_positive('ransac.inlier_threshold')])


@dataclass(frozen=True)
class ClusterParams:
    eps: float = 0.5
    min_pts: int = 5
    min_segment_size: int = 5
    index: str = 'grid'

    def __post_init__(self):
        run_validators(self.eps, [validate_positive('cluster.eps')])
        run_validators(self.min_pts, [validate_range(1, None, 'cluster.min_pts')])
        run_validators(self.min_segment_size, [validate_range(1, None, 'cluster.min_segment_size')])
        run_validators(self.index, [validate_choice(NEIGHBOR_INDEXES, 'cluster.index')])


@dataclass
class PlaneModel:
    """
    Ground plane ``normal . p + offset = 0``.

    ``inlier_mask`` marks points within the inlier threshold of the refined
    plane; its complement is the non-ground set.
    """

    normal: np.ndarray
    offset: float
    inlier_mask: np.ndarray
    inlier_threshold: float
    best_iteration: int = 0

    @property
    def inlier_count(self):
        return int(self.inlier_mask.sum())

    def distances(self, points):
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset


@dataclass
class SegmentAssignment:
    """
    Per-point segment ids: 0 is ground or noise, 1..segment_count are segments.

    For aggregated input ``per_frame_views[t]`` holds the labels of scan t's
    points in their original order.
    """

    labels: np.ndarray
    segment_count: int
    per_frame_views: list = None
    ground_mask: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    @property
    def noise_mask(self):
        mask = self.labels == 0
        if self.ground_mask is not None:
            mask &= ~self.ground_mask
        return mask

    def segment_sizes(self):
        return np.bincount(self.labels, minlength=self.segment_count + 1)[1:]

    def members(self, segment):
        return np.flatnonzero(self.labels == segment)
