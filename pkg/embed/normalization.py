"""
Per-source feature standardization and row normalization.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from core.exceptions import PoolingError, UnknownSourceError


logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
ROW_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple
    std: tuple
    count: int


@dataclass
class SourceStats:
    """Per-source channel mean and population standard deviation."""

    sources: dict = field(default_factory=dict)

    def __contains__(self, source_id):
        return int(source_id) in self.sources

    def for_source(self, source_id):
        try:
            return self.sources[int(source_id)]
        except KeyError:
            raise UnknownSourceError(
                f'No normalization statistics for source {source_id}.',
                details={'source_id': int(source_id), 'known': sorted(self.sources)},
            ) from None

    def to_dict(self):
        return {
            str(source_id): {'mean': list(stats.mean), 'std': list(stats.std), 'count': stats.count}
            for source_id, stats in sorted(self.sources.items())
        }

    @classmethod
    def from_dict(cls, data):
        return cls({
            int(source_id): ChannelStats(tuple(entry['mean']), tuple(entry['std']), int(entry['count']))
            for source_id, entry in data.items()
        })


def fit_source_stats(clouds):
    """
    Fit channel statistics per source id over the given clouds.

    Only the clouds passed in are used, so fitting on the pretraining split
    keeps probe data out of the statistics.
    """
    grouped = defaultdict(list)
    for cloud in clouds:
        grouped[int(cloud.source_id)].append(cloud.features)

    sources = {}
    for source_id, features in sorted(grouped.items()):
        stacked = np.concatenate(features, axis=0)
        sources[source_id] = ChannelStats(
            mean=tuple(float(v) for v in stacked.mean(axis=0)),
            std=tuple(float(v) for v in stacked.std(axis=0)),
            count=len(stacked),
        )
        logger.debug('Source %d stats over %d points', source_id, len(stacked))
    return SourceStats(sources)


def normalize_source_features(cloud, stats):
    """Standardize a cloud's features with its source's statistics; coords untouched."""
    channel = stats.for_source(cloud.source_id)
    mean = np.asarray(channel.mean, dtype=np.float64)
    std = np.maximum(np.asarray(channel.std, dtype=np.float64), STD_FLOOR)
    return replace(cloud, features=(cloud.features - mean) / std)


# ============================================================================
# ROW NORMALIZATION
# ============================================================================

def normalize_rows(values, strict=True):
    """
    Scale rows to unit norm.

    Args:
        values: (..., D) array
        strict: Raise PoolingError on zero rows instead of flooring the norm

    Returns:
        Tuple of (normalized rows, row norms)
    """
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    if strict and np.any(norms <= ROW_NORM_FLOOR):
        raise PoolingError(details={'zero_rows': int((norms <= ROW_NORM_FLOOR).sum())})
    norms = np.maximum(norms, ROW_NORM_FLOOR)
    return values / norms, norms


def normalize_rows_backward(normalized, norms, grad):
    """Exact Jacobian-vector product of x -> x / |x|."""
    radial = (normalized * grad).sum(axis=-1, keepdims=True)
    return (grad - normalized * radial) / norms
