"""
One optimization step's forward and backward pass over a batch of frame
pairs.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from core.exceptions import LossError
from embed.services import project_and_pool, project_and_pool_backward
from objectives.losses import LossConfig, LossResult, loss_cdp, loss_p2s, loss_slic, loss_tmp, loss_vfm, total_loss
from objectives.pairing import build_pairing, majority_classes


logger = logging.getLogger(__name__)


@dataclass
class PairSample:
    """Frames t and t + n of one scene."""

    source_id: int
    current: object
    following: object


@dataclass
class _FrameState:
    sample: object
    features: np.ndarray
    encoder_cache: object
    embeddings: np.ndarray
    head_cache: object
    grad_embeddings: np.ndarray = None

    def add_grad(self, grad):
        self.grad_embeddings = grad if self.grad_embeddings is None else self.grad_embeddings + grad


@dataclass
class _PairState:
    current: _FrameState
    following: _FrameState
    queries: object = None
    keys: object = None
    pair_cache: object = None
    grad_queries: np.ndarray = None
    grad_keys: np.ndarray = None

    def add_key_grad(self, grad):
        self.grad_keys = grad if self.grad_keys is None else self.grad_keys + grad


@dataclass
class BatchResult:
    loss: object
    gradients: object = None
    counts: dict = field(default_factory=dict)

    @property
    def value(self):
        return self.loss.value


def _forward_frame(model, sample):
    features, encoder_cache = model.encoder.forward(sample.cloud.coords, sample.cloud.features, sample.voxels)
    embeddings, head_cache = model.heads.point.forward(features)
    return _FrameState(sample, features, encoder_cache, embeddings, head_cache)


def compute_batch_loss(model, batch, config=None, compute_gradients=True, seed=0):
    """
    Composite loss of a batch and its gradient w.r.t. every trainable parameter.

    Per pair: the spatial term on frame t, the temporal term between t and
    t + n and the point-to-segment term on frame t. The cross-source term
    pairs the frame-t superpoints of every two samples from different
    sources. Each term is averaged over the samples where it is defined.

    Args:
        model: PointModel
        batch: List of PairSample
        config: LossConfig
        seed: Step seed; pair i samples its literal point-to-segment draw from seed + i

    Returns:
        BatchResult
    """
    config = config or LossConfig()
    spatial = loss_slic if config.baseline_slic else loss_vfm
    spatial_name = 'slic' if config.baseline_slic else 'vfm'
    temperature = config.temperature

    states = []
    for sample in batch:
        state = _PairState(_forward_frame(model, sample.current), _forward_frame(model, sample.following))
        if len(state.current.sample.groups):
            state.queries, state.keys, state.pair_cache = project_and_pool(
                state.current.features,
                sample.current.image,
                model.heads,
                sample.current.groups,
                sample.current.superpixels,
            )
        states.append(state)

    terms = {name: [] for name in (spatial_name, 'tmp', 'p2s', 'cdp')}
    for index, state in enumerate(states):
        current, following = state.current, state.following
        if state.keys is not None:
            result = spatial(state.queries, state.keys, temperature)
            terms[spatial_name].append((result, _spatial_backward(state)))
        try:
            result = loss_tmp(current.embeddings, following.embeddings, current.sample.segments,
                              following.sample.segments, temperature)
            terms['tmp'].append((result, _temporal_backward(current, following)))
        except LossError as exc:
            logger.debug('Temporal term skipped: %s', exc.code)
        if np.any(current.sample.segments > 0):
            result = loss_p2s(current.embeddings, current.sample.segments, temperature, config.p2s_mode,
                              seed=seed + index)
            terms['p2s'].append((result, _p2s_backward(current)))

    for first, second in combinations(range(len(states)), 2):
        state_m, state_n = states[first], states[second]
        if batch[first].source_id == batch[second].source_id or state_m.keys is None or state_n.keys is None:
            continue
        pairing = build_pairing(
            state_m.keys, state_n.keys,
            _superpoint_classes(state_m.current.sample), _superpoint_classes(state_n.current.sample),
            config.pairing,
        )
        if len(pairing) == 0:
            continue
        result = loss_cdp(state_m.keys, state_n.keys, pairing, temperature)
        terms['cdp'].append((result, _cdp_backward(state_m, state_n)))

    parts = {}
    for name, entries in terms.items():
        if not entries:
            continue
        parts[name] = LossResult(value=float(np.mean([result.value for result, _ in entries])), grad_anchor=None)
        if compute_gradients:
            scale = config.weight(name) / len(entries)
            for result, backward in entries:
                backward(result, scale)

    loss = total_loss(parts, config)
    counts = {name: len(entries) for name, entries in terms.items()}
    if not compute_gradients:
        return BatchResult(loss=loss, counts=counts)
    return BatchResult(loss=loss, gradients=_backpropagate(model, states), counts=counts)


def _superpoint_classes(sample):
    groups = sample.groups
    return majority_classes([groups.groups[segment] for segment in groups.segment_ids], sample.point_classes)


def _spatial_backward(state):
    def apply(result, scale):
        state.add_key_grad(scale * result.grad_anchor)
        grad = scale * result.grad_target
        state.grad_queries = grad if state.grad_queries is None else state.grad_queries + grad
    return apply


def _temporal_backward(current, following):
    def apply(result, scale):
        current.add_grad(scale * result.grad_anchor)
        following.add_grad(scale * result.grad_target)
    return apply


def _p2s_backward(current):
    def apply(result, scale):
        current.add_grad(scale * result.grad_anchor)
    return apply


def _cdp_backward(state_m, state_n):
    def apply(result, scale):
        state_m.add_key_grad(scale * result.grad_anchor)
        state_n.add_key_grad(scale * result.grad_target)
    return apply


def _backpropagate(model, states):
    grads = model.parameters().zeros_like()

    def accumulate(component, values):
        for name, value in values.items():
            grads[f'{component}.{name}'] += value

    for state in states:
        for frame in (state.current, state.following):
            grad_features = np.zeros_like(frame.features)
            if frame.grad_embeddings is not None:
                point_grads, grad_from_head = model.heads.point.backward(frame.head_cache, frame.grad_embeddings)
                accumulate('point_head', point_grads)
                grad_features += grad_from_head
            if frame is state.current and state.pair_cache is not None and (
                    state.grad_keys is not None or state.grad_queries is not None):
                grad_keys = state.grad_keys if state.grad_keys is not None else np.zeros_like(state.keys.values)
                grad_queries = (state.grad_queries if state.grad_queries is not None
                                else np.zeros_like(state.queries.values))
                point_grads, image_grads, grad_from_pool = project_and_pool_backward(
                    model.heads, state.pair_cache, grad_queries, grad_keys,
                )
                accumulate('point_head', point_grads)
                accumulate('image_head', image_grads)
                grad_features += grad_from_pool
            if np.any(grad_features):
                accumulate('encoder', model.encoder.backward(frame.encoder_cache, grad_features))
    return grads


def gradient_norm(gradients):
    return float(np.sqrt(sum(float((value ** 2).sum()) for _, value in gradients.items())))
