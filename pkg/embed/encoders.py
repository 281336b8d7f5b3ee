"""
Point and image encoders.

The point encoder is a two-layer per-point network whose second layer sees
each point's own hidden vector next to the mean hidden vector of its
neighborhood, a cube of CONTEXT_BLOCK voxels of VOXEL_SIZE meters per side:

    x = [features, (coords - neighborhood_centroid(coords)) / context_size]
    h = relu(x @ W1 + b1)
    F = [h, neighborhood_mean(h)] @ W2 + b2

Absolute coordinates never reach the weights, so the encoder is invariant
to translations by whole neighborhoods.

The image encoder is frozen: a seeded random projection of the RGB patch
around every stride-s grid node, optionally mixed with a one-hot of the
semantic class under the node.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from core.exceptions import NumericalError
from core.utils import STREAM_EMBED, rng_stream

from .datatypes import ImageFeatures, ParameterSet


logger = logging.getLogger(__name__)

VOXEL_SIZE = 0.10
# Voxels per side of the cubic block the context mean is taken over.
CONTEXT_BLOCK = 10


def voxel_index(coords, voxel_size=VOXEL_SIZE, block=1):
    """
    Dense neighborhood id per point plus the (neighborhoods x points)
    membership matrix. A neighborhood is a cube of ``block`` voxels per side.
    """
    cells = np.floor(np.asarray(coords, dtype=np.float64) / voxel_size).astype(np.int64)
    cells = np.floor_divide(cells, block)
    if len(cells) == 0:
        return np.zeros(0, dtype=np.int64), sparse.csr_matrix((0, 0)), np.zeros(0)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    voxels = int(inverse.max()) + 1
    membership = sparse.csr_matrix(
        (np.ones(len(inverse)), (inverse, np.arange(len(inverse)))),
        shape=(voxels, len(inverse)),
    )
    counts = np.bincount(inverse, minlength=voxels).astype(np.float64)
    return inverse, membership, counts


def voxel_mean(values, inverse, membership, counts):
    """Mean of ``values`` over each point's neighborhood, broadcast back to points."""
    return (membership @ values / counts[:, None])[inverse]


@dataclass
class EncoderCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    combined: np.ndarray
    inverse: np.ndarray
    membership: object
    counts: np.ndarray


class PointEncoder:
    """Trainable toy point encoder (L + 3 -> hidden, [hidden, neighborhood mean] -> output)."""

    PARAMETER_NAMES = ('W1', 'b1', 'W2', 'b2')

    def __init__(self, params, voxel_size=VOXEL_SIZE, context_block=CONTEXT_BLOCK):
        self.params = params
        self.voxel_size = voxel_size
        self.context_block = context_block

    @classmethod
    def initialize(cls, feature_dim=2, hidden_dim=64, output_dim=64, seed=0, voxel_size=VOXEL_SIZE,
                   context_block=CONTEXT_BLOCK):
        rng = rng_stream(seed, STREAM_EMBED, 0)
        input_dim = feature_dim + 3
        params = ParameterSet({
            'W1': rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_dim)),
            'b1': np.zeros(hidden_dim),
            'W2': rng.normal(0.0, np.sqrt(1.0 / (2 * hidden_dim)), size=(2 * hidden_dim, output_dim)),
            'b2': np.zeros(output_dim),
        })
        return cls(params, voxel_size=voxel_size, context_block=context_block)

    @property
    def context_size(self):
        """Side length of a context neighborhood in meters."""
        return self.voxel_size * self.context_block

    def voxels(self, coords):
        return voxel_index(coords, self.voxel_size, self.context_block)

    @property
    def feature_dim(self):
        return self.params['W1'].shape[0] - 3

    @property
    def hidden_dim(self):
        return self.params['W1'].shape[1]

    @property
    def output_dim(self):
        return self.params['W2'].shape[1]

    def check_finite(self):
        if not self.params.is_finite():
            raise NumericalError('Point encoder has non-finite parameters.', code='NON_FINITE_PARAMETERS')

    def forward(self, coords, features, voxels=None):
        """
        Args:
            coords: (N, 3) points
            features: (N, L) normalized features
            voxels: Optional precomputed voxels(coords) result

        Returns:
            Tuple of ((N, C) features, EncoderCache)
        """
        coords = np.asarray(coords, dtype=np.float64)
        features = np.asarray(features, dtype=np.float64)
        inverse, membership, counts = voxels if voxels is not None else self.voxels(coords)
        if len(coords):
            offsets = (coords - voxel_mean(coords, inverse, membership, counts)) / self.context_size
            inputs = np.concatenate([features, offsets], axis=1)
        else:
            inputs = np.zeros((0, self.feature_dim + 3))
        pre_activation = inputs @ self.params['W1'] + self.params['b1']
        hidden = np.maximum(pre_activation, 0.0)
        context = voxel_mean(hidden, inverse, membership, counts) if len(coords) else hidden
        combined = np.concatenate([hidden, context], axis=1)
        output = combined @ self.params['W2'] + self.params['b2']
        return output, EncoderCache(inputs, pre_activation, combined, inverse, membership, counts)

    def backward(self, cache, grad_output):
        """
        Gradients of a scalar objective w.r.t. the parameters.

        The neighborhood-mean operator is symmetric, so its adjoint is itself.
        """
        grads = ParameterSet({
            'W2': cache.combined.T @ grad_output,
            'b2': grad_output.sum(axis=0),
        })
        grad_combined = grad_output @ self.params['W2'].T
        hidden_dim = self.hidden_dim
        grad_hidden = grad_combined[:, :hidden_dim]
        if len(grad_hidden):
            grad_hidden = grad_hidden + voxel_mean(grad_combined[:, hidden_dim:], cache.inverse, cache.membership,
                                                   cache.counts)
        grad_pre = grad_hidden * (cache.pre_activation > 0)
        grads['W1'] = cache.inputs.T @ grad_pre
        grads['b1'] = grad_pre.sum(axis=0)
        return ParameterSet({name: grads[name] for name in self.PARAMETER_NAMES})

    def encode(self, cloud):
        return self.forward(cloud.coords, cloud.features)[0]


def encode_points(encoder, cloud):
    """Per-point features (N x C) of a cloud whose features are already normalized."""
    encoder.check_finite()
    output = encoder.encode(cloud)
    if not np.all(np.isfinite(output)):
        raise NumericalError('Point encoder produced non-finite features.', code='NON_FINITE_OUTPUT')
    return output


class ImageEncoder:
    """Frozen patch-projection image encoder."""

    def __init__(self, projection, stride=4, semantic_weight=0.5, seed=0):
        self.projection = projection
        self.projection.setflags(write=False)
        self.stride = stride
        self.semantic_weight = semantic_weight
        self.seed = seed

    @classmethod
    def initialize(cls, feature_dim=64, stride=4, semantic_weight=0.5, seed=0):
        patch = 2 * stride + 1
        inputs = 3 * patch * patch
        rng = rng_stream(seed, STREAM_EMBED, 1)
        projection = rng.normal(0.0, 1.0 / np.sqrt(inputs), size=(inputs, feature_dim))
        return cls(projection, stride=stride, semantic_weight=semantic_weight, seed=seed)

    @property
    def feature_dim(self):
        return self.projection.shape[1]

    def grid_shape(self, height, width):
        return (height - 1) // self.stride + 1, (width - 1) // self.stride + 1

    def encode(self, rgb, semantic_mask=None):
        """
        Feature grid with node (p, q) centered on pixel (p * s, q * s).

        Args:
            rgb: (H, W, 3) image
            semantic_mask: Optional (H, W) class ids for the one-hot mix

        Returns:
            ImageFeatures with an (H', W', E) grid
        """
        rgb = np.asarray(rgb, dtype=np.float64)
        height, width = rgb.shape[:2]
        s = self.stride
        padded = np.pad(rgb, ((s, s), (s, s), (0, 0)), mode='edge')
        windows = sliding_window_view(padded, (2 * s + 1, 2 * s + 1), axis=(0, 1))[::s, ::s]
        rows, cols = windows.shape[:2]
        features = windows.reshape(rows, cols, -1) @ self.projection
        norms = np.maximum(np.linalg.norm(features, axis=-1, keepdims=True), 1e-12)
        features = features / norms

        if semantic_mask is not None and self.semantic_weight > 0:
            classes = np.asarray(semantic_mask, dtype=np.int64)[::s, ::s] % self.feature_dim
            one_hot = np.zeros_like(features)
            np.put_along_axis(one_hot, classes[..., None], 1.0, axis=-1)
            features = (1.0 - self.semantic_weight) * features + self.semantic_weight * one_hot

        return ImageFeatures(grid=features, stride=s, height=height, width=width)


def encode_image(encoder, frame, semantic_mask=None):
    """Frozen stride-s feature grid of a camera frame."""
    return encoder.encode(frame.rgb, semantic_mask)
