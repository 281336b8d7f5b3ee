"""
Projection heads into the shared D-dimensional space.

Both heads end in row normalization. The image head is a per-node linear map
(a 1x1 convolution) followed by separable bilinear upsampling from the
stride-s grid to full resolution.
"""

from dataclasses import dataclass

import numpy as np

from core.utils import STREAM_EMBED, rng_stream

from .datatypes import ParameterSet
from .normalization import normalize_rows, normalize_rows_backward


def bilinear_weights(size, stride, nodes):
    """
    (size x nodes) interpolation matrix for one axis.

    Node k sits at pixel k * stride; pixels past the last node take its
    value, so grid values are reproduced exactly at the nodes.
    """
    weights = np.zeros((size, nodes))
    position = np.arange(size) / stride
    lower = np.minimum(np.floor(position).astype(np.int64), nodes - 1)
    upper = np.minimum(lower + 1, nodes - 1)
    fraction = np.where(upper > lower, position - lower, 0.0)
    rows = np.arange(size)
    np.add.at(weights, (rows, lower), 1.0 - fraction)
    np.add.at(weights, (rows, upper), fraction)
    return weights


def upsample(grid, row_weights, col_weights):
    return np.einsum('yp,xq,pqd->yxd', row_weights, col_weights, grid, optimize=True)


def upsample_backward(grad, row_weights, col_weights):
    return np.einsum('yp,xq,yxd->pqd', row_weights, col_weights, grad, optimize=True)


@dataclass
class HeadCache:
    inputs: np.ndarray
    normalized: np.ndarray
    norms: np.ndarray
    row_weights: np.ndarray = None
    col_weights: np.ndarray = None


class PointHead:
    """Linear C -> D, then per-point row normalization."""

    def __init__(self, params):
        self.params = params

    @classmethod
    def initialize(cls, input_dim=64, output_dim=32, seed=0):
        rng = rng_stream(seed, STREAM_EMBED, 2)
        return cls(ParameterSet({
            'W': rng.normal(0.0, np.sqrt(1.0 / input_dim), size=(input_dim, output_dim)),
            'b': np.zeros(output_dim),
        }))

    @property
    def output_dim(self):
        return self.params['W'].shape[1]

    def project(self, features):
        """Pre-normalization output."""
        return features @ self.params['W'] + self.params['b']

    def forward(self, features):
        normalized, norms = normalize_rows(self.project(features), strict=False)
        return normalized, HeadCache(features, normalized, norms)

    def backward(self, cache, grad):
        """Returns (parameter gradients, gradient w.r.t. the input features)."""
        grad_linear = normalize_rows_backward(cache.normalized, cache.norms, grad)
        grads = ParameterSet({'W': cache.inputs.T @ grad_linear, 'b': grad_linear.sum(axis=0)})
        return grads, grad_linear @ self.params['W'].T


class ImageHead:
    """1x1 linear E -> D on the grid, bilinear upsampling, per-pixel normalization."""

    def __init__(self, params):
        self.params = params

    @classmethod
    def initialize(cls, input_dim=64, output_dim=32, seed=0):
        rng = rng_stream(seed, STREAM_EMBED, 3)
        return cls(ParameterSet({
            'W': rng.normal(0.0, np.sqrt(1.0 / input_dim), size=(input_dim, output_dim)),
            'b': np.zeros(output_dim),
        }))

    def forward(self, image_features):
        """
        Args:
            image_features: ImageFeatures

        Returns:
            Tuple of ((H, W, D) normalized pixel embeddings, cache)
        """
        grid = image_features.grid
        rows, cols = grid.shape[:2]
        row_weights = bilinear_weights(image_features.height, image_features.stride, rows)
        col_weights = bilinear_weights(image_features.width, image_features.stride, cols)
        projected = grid @ self.params['W'] + self.params['b']
        normalized, norms = normalize_rows(upsample(projected, row_weights, col_weights), strict=False)
        return normalized, HeadCache(grid, normalized, norms, row_weights, col_weights)

    def backward(self, cache, grad):
        grad_upsampled = normalize_rows_backward(cache.normalized, cache.norms, grad)
        grad_projected = upsample_backward(grad_upsampled, cache.row_weights, cache.col_weights)
        flat_inputs = cache.inputs.reshape(-1, cache.inputs.shape[-1])
        flat_grad = grad_projected.reshape(-1, grad_projected.shape[-1])
        return ParameterSet({'W': flat_inputs.T @ flat_grad, 'b': flat_grad.sum(axis=0)})


@dataclass
class ProjectionHeads:
    point: PointHead
    image: ImageHead

    @classmethod
    def initialize(cls, point_dim=64, image_dim=64, embedding_dim=32, seed=0):
        return cls(
            point=PointHead.initialize(point_dim, embedding_dim, seed),
            image=ImageHead.initialize(image_dim, embedding_dim, seed),
        )
