from dataclasses import dataclass, field

import numpy as np


KIND_SLIC = 'slic'
KIND_SEMANTIC = 'semantic'
KIND_CODES = {KIND_SLIC: 0, KIND_SEMANTIC: 1}
KIND_NAMES = {code: name for name, code in KIND_CODES.items()}


@dataclass
class SuperpixelMap:
    """
    Dense label grid; 0 means unlabeled, 1..segment_count are segments.

    ``remap`` maps original label ids to dense ids when the map was densified.
    """

    labels: np.ndarray
    segment_count: int
    kind: str = KIND_SLIC
    remap: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.labels.shape

    def segment_sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.segment_count + 1)


@dataclass
class SuperpointGroups:
    """
    Point indices per superpixel segment.

    ``groups`` maps every non-empty segment id to its sorted point indices;
    ``empty_segments`` lists segment ids that received no point.
    """

    groups: dict
    uncovered_points: np.ndarray
    empty_segments: list
    point_count: int

    @property
    def segment_ids(self):
        """Non-empty segment ids in ascending order (row order of Q and K)."""
        return sorted(self.groups)

    def __len__(self):
        return len(self.groups)

    def point_labels(self):
        """Per-point segment id, 0 for uncovered points."""
        labels = np.zeros(self.point_count, dtype=np.int64)
        for segment, members in self.groups.items():
            labels[members] = segment
        return labels
