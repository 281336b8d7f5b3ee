import logging
from dataclasses import dataclass

import numpy as np

from .datatypes import ParameterSet
from .encoders import ImageEncoder, PointEncoder, encode_image, encode_points
from .heads import ProjectionHeads
from .normalization import SourceStats, normalize_source_features
from .pooling import SegmentPool


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 2
    hidden_dim: int = 64
    point_dim: int = 64
    embedding_dim: int = 32
    image_dim: int = 64
    image_stride: int = 4
    semantic_weight: float = 0.5
    voxel_size: float = 0.10
    context_block: int = 10


@dataclass
class PairCache:
    point_cache: object
    image_cache: object
    point_pool: SegmentPool
    pixel_pool: SegmentPool


def project_and_pool(point_features, image_features, heads, groups, superpixel_map):
    """
    Pooled superpixel (Q) and superpoint (K) embeddings, row-aligned.

    Only segments that received at least one point survive, in ascending id
    order; rows of Q and K name the same segment.

    Args:
        point_features: (N, C) encoder output
        image_features: ImageFeatures of the frame
        heads: ProjectionHeads
        groups: SuperpointGroups of the frame
        superpixel_map: SuperpixelMap of the frame

    Returns:
        Tuple of (Q, K, PairCache)
    """
    segment_ids = np.asarray(groups.segment_ids, dtype=np.int64)

    point_embedding, point_cache = heads.point.forward(point_features)
    point_pool = SegmentPool(groups.point_labels(), 'mean', segment_ids)
    keys = point_pool.forward(point_embedding)

    pixel_embedding, image_cache = heads.image.forward(image_features)
    pixel_pool = SegmentPool(superpixel_map.labels.ravel(), 'mean', segment_ids)
    queries = pixel_pool.forward(pixel_embedding.reshape(-1, pixel_embedding.shape[-1]))

    return queries, keys, PairCache(point_cache, image_cache, point_pool, pixel_pool)


def project_and_pool_backward(heads, cache, grad_queries, grad_keys):
    """
    Returns:
        Tuple of (point head grads, image head grads, gradient w.r.t. point features)
    """
    grad_point_embedding = cache.point_pool.backward(grad_keys)
    point_grads, grad_features = heads.point.backward(cache.point_cache, grad_point_embedding)

    grad_pixels = cache.pixel_pool.backward(grad_queries)
    image_grads = heads.image.backward(cache.image_cache, grad_pixels.reshape(cache.image_cache.normalized.shape))
    return point_grads, image_grads, grad_features


class PointModel:
    """
    Encoder, projection heads, frozen image encoder and source statistics.

    Trainable parameters are exposed under ``encoder.*``, ``point_head.*``
    and ``image_head.*``; the image encoder is never updated.
    """

    COMPONENTS = ('encoder', 'point_head', 'image_head')

    def __init__(self, encoder, heads, image_encoder, stats=None, dims=None, seed=0):
        self.encoder = encoder
        self.heads = heads
        self.image_encoder = image_encoder
        self.stats = stats or SourceStats()
        self.dims = dims or ModelDims()
        self.seed = seed

    @classmethod
    def initialize(cls, seed=0, dims=None, stats=None):
        dims = dims or ModelDims()
        return cls(
            encoder=PointEncoder.initialize(dims.feature_dim, dims.hidden_dim, dims.point_dim, seed, dims.voxel_size,
                                            dims.context_block),
            heads=ProjectionHeads.initialize(dims.point_dim, dims.image_dim, dims.embedding_dim, seed),
            image_encoder=ImageEncoder.initialize(dims.image_dim, dims.image_stride, dims.semantic_weight, seed),
            stats=stats,
            dims=dims,
            seed=seed,
        )

    def _component(self, name):
        return {
            'encoder': self.encoder.params,
            'point_head': self.heads.point.params,
            'image_head': self.heads.image.params,
        }[name]

    def parameters(self):
        """Flat view of the trainable arrays (shared, not copied)."""
        flat = ParameterSet()
        for component in self.COMPONENTS:
            for name, value in self._component(component).items():
                flat[f'{component}.{name}'] = value
        return flat

    def load_parameters(self, parameters):
        for key, value in parameters.items():
            component, name = key.split('.', 1)
            self._component(component)[name] = np.array(value, dtype=np.float64)

    def merge_gradients(self, **component_grads):
        """Flat gradient set from per-component gradients; missing ones are zero."""
        grads = self.parameters().zeros_like()
        for component, values in component_grads.items():
            if values is None:
                continue
            for name, value in values.items():
                grads[f'{component}.{name}'] += value
        return grads

    def prepare(self, cloud):
        return normalize_source_features(cloud, self.stats)

    def point_features(self, cloud):
        """Encoder output for a raw cloud (source-normalized first)."""
        return encode_points(self.encoder, self.prepare(cloud))

    def point_embeddings(self, cloud):
        """Normalized head output per point."""
        return self.heads.point.forward(self.point_features(cloud))[0]

    def image_features(self, frame, semantic_mask=None):
        return encode_image(self.image_encoder, frame, semantic_mask)

    def embed_pairs(self, cloud, frame, groups, superpixel_map, semantic_mask=None):
        """Forward pass from raw data to row-aligned (Q, K)."""
        features = self.point_features(cloud)
        queries, keys, _ = project_and_pool(
            features, self.image_features(frame, semantic_mask), self.heads, groups, superpixel_map,
        )
        return queries, keys
