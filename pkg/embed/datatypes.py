from dataclasses import dataclass, field

import numpy as np

from core.exceptions import NumericalError


NORM_TOLERANCE = 1e-6


@dataclass
class EmbeddingMatrix:
    """
    Rows of D-dimensional features.

    ``segment_ids[r]`` names the superpixel, superpoint or segment behind
    row r, which keeps anchor and target matrices row-aligned.
    """

    values: np.ndarray
    normalized: bool = True
    segment_ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values.reshape(1, -1)
        if self.segment_ids is None:
            self.segment_ids = np.arange(1, len(self.values) + 1)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        if self.normalized and len(self.values):
            norms = np.linalg.norm(self.values, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise NumericalError(
                    'Normalized embedding rows must have unit norm.',
                    code='NOT_NORMALIZED',
                    details={'worst_norm': float(norms[np.argmax(np.abs(norms - 1.0))])},
                )

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def take(self, rows):
        return EmbeddingMatrix(self.values[rows], self.normalized, self.segment_ids[rows])


@dataclass
class ImageFeatures:
    """Frozen stride-s feature grid of one image."""

    grid: np.ndarray
    stride: int
    height: int
    width: int

    @property
    def dim(self):
        return self.grid.shape[-1]


@dataclass
class ParameterSet:
    """Ordered named parameter arrays."""

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return ParameterSet({name: value.copy() for name, value in self.arrays.items()})

    def zeros_like(self):
        return ParameterSet({name: np.zeros_like(value) for name, value in self.arrays.items()})

    def is_finite(self):
        return all(np.all(np.isfinite(value)) for value in self.arrays.values())
