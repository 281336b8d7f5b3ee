"""
Cross-source superpoint pairing.

The default rule matches superpoints of the two sources by their majority
ground-truth class, taking the first superpoint of each class on both sides.
When no class is shared (or classes are unavailable) the rows are paired by
mutual nearest neighbour in embedding space.
"""

import logging
from dataclasses import dataclass

import numpy as np


logger = logging.getLogger(__name__)


@dataclass
class Pairing:
    rows_m: np.ndarray
    rows_n: np.ndarray
    method: str

    def __len__(self):
        return len(self.rows_m)

    def pairs(self):
        return list(zip(self.rows_m.tolist(), self.rows_n.tolist()))


def majority_classes(row_members, point_classes):
    """
    Majority class per row; ties go to the lowest class id.

    Args:
        row_members: Sequence of point-index arrays, one per row
        point_classes: Per-point class ids
    """
    point_classes = np.asarray(point_classes, dtype=np.int64)
    return np.array(
        [int(np.argmax(np.bincount(point_classes[members]))) for members in row_members],
        dtype=np.int64,
    )


def pair_by_class(classes_m, classes_n):
    classes_m = np.asarray(classes_m, dtype=np.int64)
    classes_n = np.asarray(classes_n, dtype=np.int64)
    shared = np.intersect1d(classes_m, classes_n)
    rows_m = np.array([np.flatnonzero(classes_m == c)[0] for c in shared], dtype=np.int64)
    rows_n = np.array([np.flatnonzero(classes_n == c)[0] for c in shared], dtype=np.int64)
    return Pairing(rows_m, rows_n, 'class')


def pair_by_nearest(keys_m, keys_n):
    """Mutual nearest neighbours by cosine similarity, ordered by source-m row."""
    keys_m = np.asarray(getattr(keys_m, 'values', keys_m), dtype=np.float64)
    keys_n = np.asarray(getattr(keys_n, 'values', keys_n), dtype=np.float64)
    if len(keys_m) == 0 or len(keys_n) == 0:
        return Pairing(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 'nearest')
    similarity = keys_m @ keys_n.T
    best_n = np.argmax(similarity, axis=1)
    best_m = np.argmax(similarity, axis=0)
    rows_m = np.flatnonzero(best_m[best_n] == np.arange(len(keys_m)))
    return Pairing(rows_m, best_n[rows_m], 'nearest')


def build_pairing(keys_m, keys_n, classes_m=None, classes_n=None, method='class'):
    """Class pairing when possible, mutual nearest neighbours otherwise."""
    if method == 'class' and classes_m is not None and classes_n is not None:
        pairing = pair_by_class(classes_m, classes_n)
        if len(pairing):
            return pairing
        logger.debug('No shared classes across sources; falling back to nearest-neighbour pairing')
    return pair_by_nearest(keys_m, keys_n)
