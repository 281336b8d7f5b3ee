from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Projection(NamedTuple):
    """One projected point."""

    pixel: tuple
    depth: float
    valid: bool


@dataclass
class ProjectionBatch:
    """
    Projections of a whole cloud, in input order.

    ``pixels`` is (N, 2) real (u, v); ``depth`` is camera-frame z;
    ``valid`` marks points in front of the near plane and inside the image.
    """

    pixels: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    height: int
    width: int

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, index):
        return Projection(
            pixel=(float(self.pixels[index, 0]), float(self.pixels[index, 1])),
            depth=float(self.depth[index]),
            valid=bool(self.valid[index]),
        )

    def __iter__(self):
        return (self[index] for index in range(len(self)))


@dataclass
class AggregatedCloud:
    """
    World-frame concatenation of several sweeps.

    ``origin_frame[i]`` / ``origin_index[i]`` locate point i in its source
    sweep.
    """

    coords: np.ndarray
    features: np.ndarray
    origin_frame: np.ndarray
    origin_index: np.ndarray
    frame_sizes: tuple
    gt_semantic: np.ndarray = None
    gt_instance: np.ndarray = None

    def __len__(self):
        return len(self.coords)

    @property
    def num_frames(self):
        return len(self.frame_sizes)

    def frame_mask(self, frame):
        return self.origin_frame == frame
