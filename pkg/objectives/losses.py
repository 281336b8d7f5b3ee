"""
Contrastive objectives with analytic gradients.

Every loss returns a LossResult whose gradients are taken w.r.t. the inputs
exactly as passed in. Row normalization done by the heads is differentiated
separately by the caller; normalization done here (segment pooling) is
differentiated here.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import LossError
from core.utils import STREAM_TRAIN, rng_stream, run_validators
from core.validators import validate_choice, validate_non_negative, validate_positive
from embed.pooling import SegmentPool


logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07
LOSS_TERMS = ('vfm', 'tmp', 'p2s', 'cdp')
P2S_MODES = ('transposed', 'literal')


@dataclass(frozen=True)
class LossWeights:
    vfm: float = 1.0
    tmp: float = 1.0
    p2s: float = 1.0
    cdp: float = 1.0

    def __post_init__(self):
        for name in LOSS_TERMS:
            run_validators(getattr(self, name), [validate_non_negative(f'weights.{name}')])


@dataclass(frozen=True)
class LossConfig:
    """
    ``baseline_slic`` swaps the semantic-superpixel term for the SLIC term,
    which then takes the ``vfm`` weight.
    """

    temperature: float = DEFAULT_TEMPERATURE
    weights: LossWeights = field(default_factory=LossWeights)
    baseline_slic: bool = False
    p2s_mode: str = 'transposed'
    pairing: str = 'class'

    def __post_init__(self):
        run_validators(self.temperature, [validate_positive('temperature')])
        run_validators(self.p2s_mode, [validate_choice(P2S_MODES, 'p2s_mode')])
        run_validators(self.pairing, [validate_choice(('class', 'nearest'), 'pairing')])

    def weight(self, term):
        if term == 'slic':
            return self.weights.vfm if self.baseline_slic else 0.0
        if term == 'vfm' and self.baseline_slic:
            return 0.0
        return getattr(self.weights, term)


@dataclass
class LossResult:
    value: float
    grad_anchor: np.ndarray
    grad_target: np.ndarray = None
    details: dict = field(default_factory=dict)


def _values(matrix):
    return np.asarray(getattr(matrix, 'values', matrix), dtype=np.float64)


# ============================================================================
# INFO-NCE
# ============================================================================

def info_nce(anchors, targets, temperature=DEFAULT_TEMPERATURE):
    """
    Mean InfoNCE of anchor row i against target row i among all target rows.

    Args:
        anchors: (M, D)
        targets: (M, D)
        temperature: Softmax temperature

    Returns:
        LossResult with gradients w.r.t. anchors and targets
    """
    anchors, targets = _values(anchors), _values(targets)
    if len(anchors) == 0:
        raise LossError('InfoNCE needs at least one pair.', code=LossError.EMPTY_BATCH)
    if anchors.shape != targets.shape:
        raise LossError(
            'Anchors and targets must have the same shape.',
            code=LossError.ROW_MISMATCH,
            details={'anchors': anchors.shape, 'targets': targets.shape},
        )

    rows = len(anchors)
    logits = anchors @ targets.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    totals = exp.sum(axis=1, keepdims=True)
    log_probs = logits - np.log(totals)
    value = -float(np.trace(log_probs)) / rows + 0.0

    weights = exp / totals
    weights[np.diag_indices(rows)] -= 1.0
    weights /= rows * temperature
    return LossResult(value=value, grad_anchor=weights @ targets, grad_target=weights.T @ anchors)


def loss_slic(queries, keys, temperature=DEFAULT_TEMPERATURE):
    """Superpoint rows (anchors) against SLIC superpixel rows (targets)."""
    return info_nce(keys, queries, temperature)


def loss_vfm(queries, keys, temperature=DEFAULT_TEMPERATURE):
    """Superpoint rows (anchors) against semantic superpixel rows (targets)."""
    return info_nce(keys, queries, temperature)


# ============================================================================
# TEMPORAL CONSISTENCY
# ============================================================================

def loss_tmp(features_t, features_t1, segments_t, segments_t1, temperature=DEFAULT_TEMPERATURE):
    """
    Symmetric temporal loss over segments present in both frames.

    Segment means of each frame are row-normalized, then contrasted in both
    directions; the two directions are summed.

    Returns:
        LossResult with grad_anchor w.r.t. features_t and grad_target
        w.r.t. features_t1
    """
    labels_t = np.asarray(getattr(segments_t, 'labels', segments_t), dtype=np.int64)
    labels_t1 = np.asarray(getattr(segments_t1, 'labels', segments_t1), dtype=np.int64)
    shared = np.intersect1d(labels_t[labels_t > 0], labels_t1[labels_t1 > 0])
    if len(shared) == 0:
        raise LossError('No segment is present in both frames.', code=LossError.NO_TEMPORAL_OVERLAP)

    pool_t = SegmentPool(labels_t, 'mean', shared)
    pool_t1 = SegmentPool(labels_t1, 'mean', shared)
    means_t = pool_t.forward(_values(features_t)).values
    means_t1 = pool_t1.forward(_values(features_t1)).values

    forward = info_nce(means_t, means_t1, temperature)
    backward = info_nce(means_t1, means_t, temperature)
    return LossResult(
        value=forward.value + backward.value,
        grad_anchor=pool_t.backward(forward.grad_anchor + backward.grad_target),
        grad_target=pool_t1.backward(forward.grad_target + backward.grad_anchor),
        details={'shared_segments': len(shared), 'forward': forward.value, 'backward': backward.value},
    )


# ============================================================================
# POINT-TO-SEGMENT
# ============================================================================

def loss_p2s(features, segments, temperature=DEFAULT_TEMPERATURE, mode='transposed', seed=0):
    """
    Pull every point towards its own segment's max-pooled feature.

    ``mode='transposed'`` contrasts each point against all cluster features.
    ``mode='literal'`` samples the same number of points from every segment
    and contrasts cluster i against the a-th sample of each segment.

    Returns:
        LossResult with grad_anchor w.r.t. features
    """
    run_validators(mode, [validate_choice(P2S_MODES, 'p2s_mode')])
    features = _values(features)
    labels = np.asarray(getattr(segments, 'labels', segments), dtype=np.int64)
    if not np.any(labels > 0):
        raise LossError('No point belongs to a segment.', code=LossError.NO_SEGMENT_POINTS)

    pool = SegmentPool(labels, 'max')
    clusters = pool.forward(features).values
    if mode == 'literal':
        value, grad_points, grad_clusters = _p2s_literal(features, pool, clusters, temperature, seed)
    else:
        value, grad_points, grad_clusters = _p2s_transposed(features, pool, clusters, temperature)
    return LossResult(
        value=value,
        grad_anchor=grad_points + pool.backward(grad_clusters),
        details={'segments': len(pool), 'mode': mode},
    )


def _p2s_transposed(features, pool, clusters, temperature):
    members = np.flatnonzero(pool.row_of >= 0)
    positives = pool.row_of[members]
    points = features[members]

    logits = points @ clusters.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    totals = exp.sum(axis=1, keepdims=True)
    rows = np.arange(len(members))
    value = -float(np.mean(logits[rows, positives] - np.log(totals[:, 0]))) + 0.0

    weights = exp / totals
    weights[rows, positives] -= 1.0
    weights /= len(members) * temperature
    grad_points = np.zeros_like(features)
    grad_points[members] = weights @ clusters
    return value, grad_points, weights.T @ points


def _p2s_literal(features, pool, clusters, temperature, seed):
    segment_count = len(pool)
    per_segment = min(len(members) for members in pool.members)
    rng = rng_stream(seed, STREAM_TRAIN, 2)
    samples = np.stack([
        np.sort(rng.choice(members, size=per_segment, replace=False)) for members in pool.members
    ])
    sampled = features[samples]

    logits = np.einsum('id,jad->iaj', clusters, sampled) / temperature
    logits -= logits.max(axis=2, keepdims=True)
    exp = np.exp(logits)
    totals = exp.sum(axis=2, keepdims=True)
    diagonal = np.arange(segment_count)
    value = -float(np.mean(logits[diagonal, :, diagonal] - np.log(totals[diagonal, :, 0]))) + 0.0

    weights = exp / totals
    weights[diagonal, :, diagonal] -= 1.0
    weights /= segment_count * per_segment * temperature
    grad_clusters = np.einsum('iaj,jad->id', weights, sampled)
    grad_points = np.zeros_like(features)
    np.add.at(grad_points, samples, np.einsum('iaj,id->jad', weights, clusters))
    return value, grad_points, grad_clusters


# ============================================================================
# CROSS-SOURCE
# ============================================================================

def loss_cdp(keys_m, keys_n, pairing, temperature=DEFAULT_TEMPERATURE):
    """
    Symmetric InfoNCE over paired superpoint rows of two sources.

    Args:
        keys_m: (M_m, D) embeddings of source m
        keys_n: (M_n, D) embeddings of source n
        pairing: Pairing (or sequence of (row_m, row_n) pairs)

    Returns:
        LossResult with grad_anchor w.r.t. keys_m and grad_target w.r.t. keys_n
    """
    keys_m, keys_n = _values(keys_m), _values(keys_n)
    rows_m, rows_n = _pair_rows(pairing)
    if len(rows_m) == 0:
        raise LossError('No cross-source pairs to contrast.', code=LossError.NO_CROSS_SOURCE_PAIRS)

    anchors, targets = keys_m[rows_m], keys_n[rows_n]
    forward = info_nce(anchors, targets, temperature)
    backward = info_nce(targets, anchors, temperature)

    grad_m = np.zeros_like(keys_m)
    grad_n = np.zeros_like(keys_n)
    np.add.at(grad_m, rows_m, 0.5 * (forward.grad_anchor + backward.grad_target))
    np.add.at(grad_n, rows_n, 0.5 * (forward.grad_target + backward.grad_anchor))
    return LossResult(
        value=0.5 * (forward.value + backward.value),
        grad_anchor=grad_m,
        grad_target=grad_n,
        details={'pairs': len(rows_m), 'forward': forward.value, 'backward': backward.value},
    )


def _pair_rows(pairing):
    if hasattr(pairing, 'rows_m'):
        return np.asarray(pairing.rows_m, dtype=np.int64), np.asarray(pairing.rows_n, dtype=np.int64)
    pairs = np.asarray(list(pairing), dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


# ============================================================================
# COMPOSITE
# ============================================================================

@dataclass
class CompositeLoss:
    """Weighted sum of loss terms; ``terms`` maps name -> (weight, LossResult)."""

    value: float
    terms: dict

    def component(self, name):
        return self.terms[name][1].value if name in self.terms else 0.0

    def weighted_gradients(self, name):
        """(weight * grad_anchor, weight * grad_target) of one term."""
        weight, result = self.terms[name]
        target = None if result.grad_target is None else weight * result.grad_target
        return weight * result.grad_anchor, target


def total_loss(parts, config=None):
    """
    Combine computed loss terms.

    Args:
        parts: {'vfm' | 'slic' | 'tmp' | 'p2s' | 'cdp': LossResult}
        config: LossConfig; 'slic' only counts in baseline mode

    Returns:
        CompositeLoss
    """
    config = config or LossConfig()
    terms = {}
    value = 0.0
    for name, result in parts.items():
        if result is None:
            continue
        weight = config.weight(name)
        terms[name] = (weight, result)
        value += weight * result.value
    return CompositeLoss(value=value, terms=terms)
