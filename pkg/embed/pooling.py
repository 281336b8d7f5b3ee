"""
Group pooling with analytic backward passes.

Rows are pooled per segment id (0 is never pooled), then row-normalized.
"""

import logging

import numpy as np
from scipy import sparse

from core.exceptions import PoolingError
from core.utils import run_validators
from core.validators import validate_choice

from .datatypes import EmbeddingMatrix
from .normalization import normalize_rows, normalize_rows_backward


logger = logging.getLogger(__name__)

POOL_MODES = ('mean', 'max')


class SegmentPool:
    """
    Mean or element-wise max pooling of rows grouped by label.

    Args:
        labels: Segment id per row (0 = excluded)
        mode: 'mean' or 'max'
        segment_ids: Ids to pool, in output row order; defaults to the
            sorted non-zero labels. Ids without members are dropped and
            listed in ``excluded``.
        normalize: Row-normalize the pooled vectors
    """

    def __init__(self, labels, mode='mean', segment_ids=None, normalize=True):
        run_validators(mode, [validate_choice(POOL_MODES, 'pooling mode')])
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.mode = mode
        self.normalize = normalize

        present = np.unique(self.labels[self.labels > 0])
        requested = present if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
        members = np.isin(requested, present)
        self.segment_ids = requested[members]
        self.excluded = requested[~members]

        lookup = np.full(int(max(self.labels.max(initial=0), requested.max(initial=0))) + 1, -1, dtype=np.int64)
        lookup[self.segment_ids] = np.arange(len(self.segment_ids))
        self.row_of = np.where(self.labels > 0, lookup[np.maximum(self.labels, 0)], -1)

        pooled_items = np.flatnonzero(self.row_of >= 0)
        order = pooled_items[np.argsort(self.row_of[pooled_items], kind='stable')]
        bounds = np.searchsorted(self.row_of[order], np.arange(len(self.segment_ids) + 1))
        self.members = [order[bounds[row]:bounds[row + 1]] for row in range(len(self.segment_ids))]
        self.assignment = sparse.csr_matrix(
            (np.ones(len(pooled_items)), (self.row_of[pooled_items], pooled_items)),
            shape=(len(self.segment_ids), len(self.labels)),
        )
        self.counts = np.bincount(self.row_of[pooled_items], minlength=len(self.segment_ids)).astype(np.float64)
        self._winners = None
        self._normalized = None
        self._norms = None

    def __len__(self):
        return len(self.segment_ids)

    def forward(self, values):
        values = np.asarray(values, dtype=np.float64)
        if self.mode == 'mean':
            pooled = self.assignment @ values / self.counts[:, None]
        else:
            pooled = np.empty((len(self.segment_ids), values.shape[1]))
            self._winners = np.empty(pooled.shape, dtype=np.int64)
            for row in range(len(self.segment_ids)):
                members = self.members[row]
                # argmax returns the first member on ties.
                best = np.argmax(values[members], axis=0)
                self._winners[row] = members[best]
                pooled[row] = values[members[best], np.arange(values.shape[1])]

        if not self.normalize:
            return EmbeddingMatrix(pooled, normalized=False, segment_ids=self.segment_ids)
        try:
            self._normalized, self._norms = normalize_rows(pooled, strict=True)
        except PoolingError as exc:
            exc.details['segment_ids'] = self.segment_ids[np.linalg.norm(pooled, axis=1) <= 1e-12].tolist()
            raise
        return EmbeddingMatrix(self._normalized, normalized=True, segment_ids=self.segment_ids)

    def backward(self, grad_rows):
        """Gradient w.r.t. the pooled input rows; max pooling routes to the winning row."""
        grad_rows = np.asarray(grad_rows, dtype=np.float64)
        if self.normalize:
            grad_rows = normalize_rows_backward(self._normalized, self._norms, grad_rows)
        if self.mode == 'mean':
            return self.assignment.T @ (grad_rows / self.counts[:, None])

        grad_values = np.zeros((len(self.labels), grad_rows.shape[1]))
        columns = np.broadcast_to(np.arange(grad_rows.shape[1]), grad_rows.shape)
        np.add.at(grad_values, (self._winners, columns), grad_rows)
        return grad_values


def pool_segment_features(features, assignment, mode='mean'):
    """
    Pool point features per segment.

    Args:
        features: (N, D) point features
        assignment: SegmentAssignment or per-point label array
        mode: 'mean' or 'max'

    Returns:
        Normalized EmbeddingMatrix with one row per non-empty segment;
        ``segment_ids`` maps rows back to segment ids
    """
    labels = getattr(assignment, 'labels', assignment)
    return SegmentPool(labels, mode).forward(features)
