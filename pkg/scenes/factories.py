"""
Test factories for scene specs and point clouds.
"""

import factory
import numpy as np

from .datatypes import ObjectSpec, PointCloud, SceneSpec, SourceProfile
from .presets import beam_elevations, default_camera, straight_trajectory


class SourceProfileFactory(factory.Factory):
    class Meta:
        model = SourceProfile

    source_id = 1
    intensity_range = (0.0, 255.0)
    beam_count = 8
    dropout_rate = 0.0
    name = 'A'


class ObjectSpecFactory(factory.Factory):
    class Meta:
        model = ObjectSpec

    kind = 'box'
    center = (10.0, 0.0, 0.75)
    size = (4.2, 1.8, 1.5)
    semantic_class = 1


class SceneSpecFactory(factory.Factory):
    """Small scene: one box in front of the ego, 8 beams, 180 azimuths."""

    class Meta:
        model = SceneSpec

    rng_seed = factory.Sequence(lambda n: n)
    objects = factory.LazyFunction(lambda: (ObjectSpecFactory(),))
    ground_extent = 40.0
    num_frames = 2
    ego_trajectory = factory.LazyAttribute(lambda o: straight_trajectory(o.num_frames))
    beam_elevations = factory.LazyAttribute(lambda o: beam_elevations(o.source_profile.beam_count))
    azimuth_count = 180
    camera = factory.LazyFunction(default_camera)
    source_profile = factory.SubFactory(SourceProfileFactory)
    scene_id = factory.Sequence(lambda n: f'test_scene_{n:03d}')


class PointCloudFactory(factory.Factory):
    """Random cloud; ``points`` sets the size."""

    class Meta:
        model = PointCloud

    class Params:
        points = 32
        seed = 0

    coords = factory.LazyAttribute(lambda o: np.random.default_rng(o.seed).uniform(-10.0, 10.0, size=(o.points, 3)))
    features = factory.LazyAttribute(lambda o: np.random.default_rng(o.seed + 1).uniform(0.0, 1.0, size=(o.points, 2)))
    timestamp = 0
    source_id = 1
    gt_semantic = factory.LazyAttribute(lambda o: np.zeros(o.points, dtype=np.int64))
    gt_instance = factory.LazyAttribute(lambda o: np.zeros(o.points, dtype=np.int64))
