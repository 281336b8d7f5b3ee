"""
Finite-difference gradient suite.

Every loss is checked on random instances (M <= 16, D <= 8) with central
differences at h = 1e-5. The relative error of a check is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`` over
all inputs of the instance. The end-to-end check differentiates one
micro-batch through pooling, heads, the point encoder and every loss term
with respect to the trainable parameters.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from core.utils import STREAM_GRADCHECK, rng_stream
from embed.datatypes import ImageFeatures
from embed.encoders import voxel_index
from embed.services import ModelDims, PointModel
from scenes.datatypes import PointCloud
from superpixels.datatypes import KIND_SEMANTIC, SuperpixelMap, SuperpointGroups
from training.data import FrameSample
from training.steps import PairSample, compute_batch_loss

from .losses import LossConfig, LossWeights, info_nce, loss_cdp, loss_p2s, loss_slic, loss_tmp, loss_vfm, total_loss


logger = logging.getLogger(__name__)

STEP = 1e-5
LOSS_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
INSTANCES = 20
MAX_ROWS = 16
MAX_DIM = 8
TIE_GAP = 1e-3
KINK_GAP = 1e-4


@dataclass
class GradcheckCase:
    check: str
    instance: int
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


@dataclass
class GradcheckReport:
    cases: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(case.passed for case in self.cases)

    def failures(self):
        return [case for case in self.cases if not case.passed]

    def summary(self):
        """Per check: instance count, worst error, tolerance and verdict."""
        checks = {}
        for case in self.cases:
            entry = checks.setdefault(case.check, {
                'instances': 0, 'max_error': 0.0, 'tolerance': case.tolerance, 'passed': True,
            })
            entry['instances'] += 1
            entry['max_error'] = max(entry['max_error'], case.error)
            entry['passed'] = entry['passed'] and case.passed
        return checks


def relative_error(analytic, numeric):
    analytic = np.concatenate([np.ravel(a) for a in analytic])
    numeric = np.concatenate([np.ravel(n) for n in numeric])
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_gradient(function, array, step=STEP):
    """Central differences of ``function()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    for position in np.ndindex(array.shape):
        original = array[position]
        array[position] = original + step
        plus = function()
        array[position] = original - step
        minus = function()
        array[position] = original
        grad[position] = (plus - minus) / (2.0 * step)
    return grad


def check_inputs(function, inputs, analytic, step=STEP):
    """Relative error between analytic gradients and central differences of ``function(*inputs)``."""
    numeric = [numeric_gradient(lambda: function(*inputs), array, step) for array in inputs]
    return relative_error(analytic, numeric)


# ============================================================================
# RANDOM INSTANCES
# ============================================================================

def _unit_rows(rng, rows, dim):
    values = rng.normal(size=(rows, dim))
    return values / np.linalg.norm(values, axis=1, keepdims=True)


def _temperature(rng):
    return float(rng.uniform(0.1, 1.0))


def _segment_labels(rng, points, segments, noise=True):
    """Labels 1..segments, each used at least once, plus optional noise points."""
    labels = np.concatenate([np.arange(1, segments + 1), rng.integers(1, segments + 1, size=points - segments)])
    if noise:
        labels[rng.random(points) < 0.1] = 0
        labels[:segments] = np.arange(1, segments + 1)
    return rng.permutation(labels)


def _max_pool_gap(values, labels):
    """Smallest gap between the top two members of any (segment, dim)."""
    gap = np.inf
    for segment in np.unique(labels[labels > 0]):
        members = np.sort(values[labels == segment], axis=0)
        if len(members) > 1:
            gap = min(gap, float(np.min(members[-1] - members[-2])))
    return gap


def _p2s_features(rng, points, dim, labels):
    while True:
        features = rng.normal(size=(points, dim))
        if _max_pool_gap(features, labels) >= TIE_GAP:
            return features


def check_info_nce(rng):
    rows, dim = int(rng.integers(1, MAX_ROWS + 1)), int(rng.integers(1, MAX_DIM + 1))
    anchors, targets, tau = _unit_rows(rng, rows, dim), _unit_rows(rng, rows, dim), _temperature(rng)
    result = info_nce(anchors, targets, tau)
    return check_inputs(lambda a, t: info_nce(a, t, tau).value, [anchors, targets],
                        [result.grad_anchor, result.grad_target])


def _check_spatial(rng, loss):
    rows, dim = int(rng.integers(1, MAX_ROWS + 1)), int(rng.integers(1, MAX_DIM + 1))
    queries, keys, tau = _unit_rows(rng, rows, dim), _unit_rows(rng, rows, dim), _temperature(rng)
    result = loss(queries, keys, tau)
    return check_inputs(lambda q, k: loss(q, k, tau).value, [queries, keys],
                        [result.grad_target, result.grad_anchor])


def check_vfm(rng):
    return _check_spatial(rng, loss_vfm)


def check_slic(rng):
    return _check_spatial(rng, loss_slic)


def _tmp_instance(rng):
    segments, dim = int(rng.integers(1, MAX_ROWS + 1)), int(rng.integers(1, MAX_DIM + 1))
    points_t = segments + int(rng.integers(0, 24))
    points_t1 = segments + int(rng.integers(0, 24))
    labels_t = _segment_labels(rng, points_t, segments)
    labels_t1 = _segment_labels(rng, points_t1, segments)
    return rng.normal(size=(points_t, dim)), rng.normal(size=(points_t1, dim)), labels_t, labels_t1


def check_tmp(rng):
    features_t, features_t1, labels_t, labels_t1 = _tmp_instance(rng)
    tau = _temperature(rng)
    result = loss_tmp(features_t, features_t1, labels_t, labels_t1, tau)
    return check_inputs(lambda a, b: loss_tmp(a, b, labels_t, labels_t1, tau).value, [features_t, features_t1],
                        [result.grad_anchor, result.grad_target])


def _check_p2s(rng, mode):
    segments, dim = int(rng.integers(1, MAX_ROWS + 1)), int(rng.integers(1, MAX_DIM + 1))
    points = segments + int(rng.integers(0, 32))
    labels = _segment_labels(rng, points, segments)
    features = _p2s_features(rng, points, dim, labels)
    tau = _temperature(rng)
    result = loss_p2s(features, labels, tau, mode)
    return check_inputs(lambda f: loss_p2s(f, labels, tau, mode).value, [features], [result.grad_anchor])


def check_p2s_transposed(rng):
    return _check_p2s(rng, 'transposed')


def check_p2s_literal(rng):
    return _check_p2s(rng, 'literal')


def _cdp_instance(rng, dim=None):
    dim = dim or int(rng.integers(1, MAX_DIM + 1))
    rows_m, rows_n = int(rng.integers(1, MAX_ROWS + 1)), int(rng.integers(1, MAX_ROWS + 1))
    pairs = int(rng.integers(1, min(rows_m, rows_n) + 1))
    pairing = list(zip(rng.choice(rows_m, pairs, replace=False).tolist(),
                       rng.choice(rows_n, pairs, replace=False).tolist()))
    return _unit_rows(rng, rows_m, dim), _unit_rows(rng, rows_n, dim), pairing


def check_cdp(rng):
    keys_m, keys_n, pairing = _cdp_instance(rng)
    tau = _temperature(rng)
    result = loss_cdp(keys_m, keys_n, pairing, tau)
    return check_inputs(lambda m, n: loss_cdp(m, n, pairing, tau).value, [keys_m, keys_n],
                        [result.grad_anchor, result.grad_target])


def check_total(rng):
    """Weighted sum of all four terms sharing the frame-t features and keys."""
    features_t, features_t1, labels_t, labels_t1 = _tmp_instance(rng)
    while _max_pool_gap(features_t, labels_t) < TIE_GAP:
        features_t = rng.normal(size=features_t.shape)
    dim = features_t.shape[1]
    keys, other_keys, pairing = _cdp_instance(rng, dim)
    queries = _unit_rows(rng, len(keys), dim)
    config = LossConfig(
        temperature=_temperature(rng),
        weights=LossWeights(*rng.uniform(0.0, 1.0, size=4).tolist()),
    )
    tau = config.temperature

    def parts(q, k, k2, f_t, f_t1):
        return {
            'vfm': loss_vfm(q, k, tau),
            'tmp': loss_tmp(f_t, f_t1, labels_t, labels_t1, tau),
            'p2s': loss_p2s(f_t, labels_t, tau),
            'cdp': loss_cdp(k, k2, pairing, tau),
        }

    inputs = [queries, keys, other_keys, features_t, features_t1]
    computed = total_loss(parts(*inputs), config)
    vfm_k, vfm_q = computed.weighted_gradients('vfm')
    tmp_t, tmp_t1 = computed.weighted_gradients('tmp')
    p2s_t, _ = computed.weighted_gradients('p2s')
    cdp_m, cdp_n = computed.weighted_gradients('cdp')
    analytic = [vfm_q, vfm_k + cdp_m, cdp_n, tmp_t + p2s_t, tmp_t1]
    return check_inputs(lambda *arrays: total_loss(parts(*arrays), config).value, inputs, analytic)


# ============================================================================
# END TO END
# ============================================================================

def micro_batch(rng, points=48):
    """
    Small model and two frame pairs from different sources.

    Every frame has two superpoints (also its two segments), so each loss
    term takes part.
    """
    dims = ModelDims(feature_dim=2, hidden_dim=8, point_dim=8, embedding_dim=4, image_dim=6, image_stride=2)
    model = PointModel.initialize(seed=int(rng.integers(2 ** 31)), dims=dims)
    height = width = 8
    superpixel_labels = np.ones((height, width), dtype=np.int64)
    superpixel_labels[:, width // 2:] = 2
    superpixels = SuperpixelMap(superpixel_labels, 2, KIND_SEMANTIC)

    def frame(source_id, timestamp):
        segments = np.repeat([1, 2], points // 2)
        cloud = PointCloud(
            coords=rng.uniform(-0.3, 0.3, size=(points, 3)) + np.where(segments[:, None] == 1, -1.0, 1.0),
            features=rng.normal(size=(points, 2)),
            timestamp=timestamp,
            source_id=source_id,
            gt_semantic=segments,
            gt_instance=segments,
        )
        groups = SuperpointGroups(
            groups={1: np.flatnonzero(segments == 1), 2: np.flatnonzero(segments == 2)},
            uncovered_points=np.zeros(0, dtype=np.int64),
            empty_segments=[],
            point_count=points,
        )
        image = ImageFeatures(rng.normal(size=(height // 2, width // 2, dims.image_dim)), 2, height, width)
        voxels = voxel_index(cloud.coords, dims.voxel_size, dims.context_block)
        return FrameSample(source_id, cloud, voxels, image, superpixels, groups, segments)

    batch = [PairSample(source, frame(source, 0), frame(source, 1)) for source in (1, 2)]
    return model, batch


def _well_conditioned(model, batch):
    """No ReLU input and no max-pool contest is within a finite-difference step of flipping."""
    for pair in batch:
        for sample in (pair.current, pair.following):
            features, cache = model.encoder.forward(sample.cloud.coords, sample.cloud.features, sample.voxels)
            if np.min(np.abs(cache.pre_activation)) < KINK_GAP:
                return False
            embeddings, _ = model.heads.point.forward(features)
            if _max_pool_gap(embeddings, sample.segments) < TIE_GAP:
                return False
    return True


def check_end_to_end(rng):
    model, batch = micro_batch(rng)
    while not _well_conditioned(model, batch):
        model, batch = micro_batch(rng)
    config = LossConfig(temperature=_temperature(rng))
    result = compute_batch_loss(model, batch, config)
    parameters = model.parameters()
    names = [name for name, _ in parameters.items()]
    numeric = [
        numeric_gradient(lambda: compute_batch_loss(model, batch, config, compute_gradients=False).value,
                         parameters[name])
        for name in names
    ]
    return relative_error([result.gradients[name] for name in names], numeric)


CHECKS = (
    ('info_nce', check_info_nce, LOSS_TOLERANCE),
    ('vfm', check_vfm, LOSS_TOLERANCE),
    ('slic', check_slic, LOSS_TOLERANCE),
    ('tmp', check_tmp, LOSS_TOLERANCE),
    ('p2s', check_p2s_transposed, LOSS_TOLERANCE),
    ('p2s_literal', check_p2s_literal, LOSS_TOLERANCE),
    ('cdp', check_cdp, LOSS_TOLERANCE),
    ('total', check_total, LOSS_TOLERANCE),
)


def run_gradcheck(seed=0, instances=INSTANCES, end_to_end_instances=3):
    """
    Run every check on its own random stream of the seed.

    Returns:
        GradcheckReport
    """
    started = time.perf_counter()
    report = GradcheckReport()
    suite = [*CHECKS, ('end_to_end', check_end_to_end, END_TO_END_TOLERANCE)]
    for check_index, (name, check, tolerance) in enumerate(suite):
        count = end_to_end_instances if name == 'end_to_end' else instances
        for instance in range(count):
            rng = rng_stream(seed, STREAM_GRADCHECK, check_index, instance)
            error = check(rng)
            report.cases.append(GradcheckCase(name, instance, error, tolerance))
            logger.debug('gradcheck %s[%d]: relative error %.3e', name, instance, error)
    report.seconds = time.perf_counter() - started

    for name, entry in report.summary().items():
        logger.info('gradcheck %-12s %2d instances  max rel err %.2e  %s',
                    name, entry['instances'], entry['max_error'], 'ok' if entry['passed'] else 'FAILED')
    return report
