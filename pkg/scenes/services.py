import logging

import numpy as np

from core.utils import STREAM_SYNTH, ordered_map, rng_stream

from .datatypes import GROUND_CLASS, CameraFrame, PointCloud, SceneSequence


logger = logging.getLogger(__name__)


MISS = np.inf
HIT_EPSILON = 1e-9

# Base reflectivity in [0, 1] per semantic class, before source scaling.
CLASS_REFLECTIVITY = {
    0: 0.20,
    1: 0.85,
    2: 0.55,
    3: 0.35,
    4: 0.70,
}

# Half-width of the per-point reflectivity noise.
REFLECTIVITY_JITTER = 0.3

CLASS_COLORS = {
    0: (0.42, 0.42, 0.40),
    1: (0.80, 0.15, 0.15),
    2: (0.85, 0.80, 0.20),
    3: (0.55, 0.45, 0.35),
    4: (0.20, 0.45, 0.85),
}
SKY_COLOR = (0.60, 0.78, 0.95)


def class_reflectivity(semantic_class):
    """Base reflectivity for a class id; unknown ids get a deterministic value."""
    if semantic_class in CLASS_REFLECTIVITY:
        return CLASS_REFLECTIVITY[semantic_class]
    return 0.1 + (0.17 * semantic_class) % 0.8


def class_color(semantic_class):
    if semantic_class in CLASS_COLORS:
        return np.asarray(CLASS_COLORS[semantic_class])
    phase = semantic_class * 0.618033988749895
    return np.asarray([(phase + k / 3.0) % 1.0 for k in range(3)]) * 0.8 + 0.1


class RayCaster:
    """
    Nearest-hit ray casting against a ground plane, axis-aligned boxes and
    vertical cylinders, all in the world frame.
    """

    def __init__(self, objects, frame_index, ground_extent, max_range):
        self.objects = objects
        self.frame_index = frame_index
        self.ground_extent = ground_extent
        self.max_range = max_range

    def cast(self, origins, directions):
        """
        Cast unit-direction rays.

        Args:
            origins: (R, 3) world-frame ray origins
            directions: (R, 3) world-frame unit directions

        Returns:
            Tuple of (distance, instance id, semantic class); distance is inf
            where nothing is hit within max_range.
        """
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
        rays = len(directions)
        best = np.full(rays, MISS)
        instance = np.zeros(rays, dtype=np.int64)
        semantic = np.full(rays, GROUND_CLASS, dtype=np.int64)

        if self.ground_extent > 0:
            distance = self._hit_ground(origins, directions)
            closer = distance < best
            best[closer] = distance[closer]

        for index, obj in enumerate(self.objects):
            center = obj.center_at(self.frame_index)
            size = np.asarray(obj.size, dtype=np.float64)
            if obj.kind == 'box':
                distance = self._hit_box(origins, directions, center - size / 2, center + size / 2)
            else:
                distance = self._hit_cylinder(origins, directions, center, size[0] / 2, size[2])
            closer = distance < best
            best[closer] = distance[closer]
            instance[closer] = index + 1
            semantic[closer] = obj.semantic_class

        out_of_range = best > self.max_range
        best[out_of_range] = MISS
        instance[out_of_range] = 0
        semantic[out_of_range] = GROUND_CLASS
        return best, instance, semantic

    def _hit_ground(self, origins, directions):
        distance = np.full(len(directions), MISS)
        downward = directions[:, 2] < -1e-12
        s = -origins[downward, 2] / directions[downward, 2]
        hit = origins[downward] + s[:, None] * directions[downward]
        inside = (s > HIT_EPSILON) & (np.abs(hit[:, 0]) <= self.ground_extent) & (np.abs(hit[:, 1]) <= self.ground_extent)
        values = np.where(inside, s, MISS)
        distance[downward] = values
        return distance

    @staticmethod
    def _hit_box(origins, directions, low, high):
        safe = np.where(np.abs(directions) < 1e-15, 1e-15, directions)
        t1 = (low - origins) / safe
        t2 = (high - origins) / safe
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > HIT_EPSILON)
        return np.where(hit, t_near, MISS)

    @staticmethod
    def _hit_cylinder(origins, directions, center, radius, height):
        z_low = center[2] - height / 2
        z_high = center[2] + height / 2
        distance = np.full(len(directions), MISS)

        # Side wall.
        ox = origins[:, 0] - center[0]
        oy = origins[:, 1] - center[1]
        dx, dy, dz = directions[:, 0], directions[:, 1], directions[:, 2]
        a = dx * dx + dy * dy
        b = 2.0 * (dx * ox + dy * oy)
        c = ox * ox + oy * oy - radius * radius
        discriminant = b * b - 4.0 * a * c
        side = (a > 1e-15) & (discriminant >= 0)
        root = np.sqrt(np.where(side, discriminant, 0.0))
        s = np.where(side, (-b - root) / np.where(side, 2.0 * a, 1.0), MISS)
        z = origins[:, 2] + s * dz
        side_hit = side & (s > HIT_EPSILON) & (z >= z_low) & (z <= z_high)
        distance = np.where(side_hit, s, distance)

        # Caps.
        for cap_z in (z_low, z_high):
            vertical = np.abs(dz) > 1e-15
            s_cap = np.where(vertical, (cap_z - origins[:, 2]) / np.where(vertical, dz, 1.0), MISS)
            px = ox + s_cap * dx
            py = oy + s_cap * dy
            cap_hit = vertical & (s_cap > HIT_EPSILON) & (px * px + py * py <= radius * radius)
            distance = np.where(cap_hit & (s_cap < distance), s_cap, distance)
        return distance


class SceneSynthesisService:
    """Service for generating LiDAR sweeps and camera frames from a SceneSpec."""

    def __init__(self, threads=None):
        self.threads = threads

    def synthesize_scene(self, spec):
        """
        Synthesize every frame of a scene.

        Args:
            spec: SceneSpec

        Returns:
            SceneSequence of (PointCloud, CameraFrame) pairs, one per frame
        """
        frames = ordered_map(lambda t: self.synthesize_frame(spec, t), range(spec.num_frames), self.threads)
        logger.info(
            'Synthesized %s: %d frames, %d points (source %d)',
            spec.scene_id, len(frames), sum(len(cloud) for cloud, _ in frames), spec.source_profile.source_id,
        )
        return SceneSequence(
            scene_id=spec.scene_id,
            source_profile=spec.source_profile,
            poses=[np.asarray(pose, dtype=np.float64) for pose in spec.ego_trajectory],
            frames=frames,
            instance_classes=spec.instance_classes(),
        )

    def synthesize_frame(self, spec, frame_index):
        """Synthesize the (PointCloud, CameraFrame) pair of one frame."""
        pose = np.asarray(spec.ego_trajectory[frame_index], dtype=np.float64)
        caster = RayCaster(spec.objects, frame_index, spec.ground_extent, spec.max_range)
        cloud = self.scan(spec, caster, pose, frame_index)
        camera = self.render(spec, caster, pose, frame_index)
        return cloud, camera

    def scan(self, spec, caster, pose, frame_index):
        """Cast every beam/azimuth ray from the ego origin."""
        profile = spec.source_profile
        rng = rng_stream(spec.rng_seed, STREAM_SYNTH, profile.source_id, frame_index)

        elevations = np.asarray(spec.beam_elevations, dtype=np.float64)
        azimuths = 2.0 * np.pi * np.arange(spec.azimuth_count) / spec.azimuth_count
        elevation_grid, azimuth_grid = np.meshgrid(elevations, azimuths, indexing='ij')
        local_directions = np.stack([
            np.cos(elevation_grid) * np.cos(azimuth_grid),
            np.cos(elevation_grid) * np.sin(azimuth_grid),
            np.sin(elevation_grid),
        ], axis=-1).reshape(-1, 3)

        rotation, translation = pose[:3, :3], pose[:3, 3]
        distance, instance, semantic = caster.cast(translation, local_directions @ rotation.T)

        keep = np.isfinite(distance)
        keep &= rng.random(len(distance)) >= profile.dropout_rate
        coords = local_directions[keep] * distance[keep, None]
        semantic = semantic[keep]
        instance = instance[keep]

        reflectivity = np.array([class_reflectivity(int(c)) for c in semantic], dtype=np.float64)
        jitter = rng.uniform(-REFLECTIVITY_JITTER, REFLECTIVITY_JITTER, size=len(semantic))
        reflectivity = np.clip(reflectivity + jitter, 0.0, 1.0)
        low, high = profile.intensity_range
        intensity = low + reflectivity * (high - low)
        features = np.stack([intensity, coords[:, 2]], axis=1) if len(coords) else np.zeros((0, 2))

        return PointCloud(
            coords=coords,
            features=features,
            timestamp=frame_index,
            source_id=profile.source_id,
            gt_semantic=semantic,
            gt_instance=instance,
        )

    def render(self, spec, caster, pose, frame_index):
        """Render RGB and the per-pixel instance mask by nearest primitive."""
        camera = spec.camera
        rng = rng_stream(spec.rng_seed, STREAM_SYNTH, spec.source_profile.source_id, frame_index, 1)

        v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing='ij')
        pixels = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1).astype(np.float64)
        camera_directions = pixels @ np.linalg.inv(camera.intrinsics).T

        # Camera frame -> LiDAR frame -> world frame.
        cam_rotation = camera.extrinsics[:3, :3]
        cam_translation = camera.extrinsics[:3, 3]
        lidar_directions = camera_directions @ cam_rotation
        lidar_origin = -cam_rotation.T @ cam_translation
        world_directions = lidar_directions @ pose[:3, :3].T
        world_directions /= np.linalg.norm(world_directions, axis=1, keepdims=True)
        world_origin = pose[:3, :3] @ lidar_origin + pose[:3, 3]

        distance, instance, semantic = caster.cast(world_origin, world_directions)

        colors = np.empty((len(distance), 3))
        for semantic_class in np.unique(semantic):
            selected = semantic == semantic_class
            colors[selected] = class_color(int(semantic_class))
        tint = 0.85 + 0.15 * np.cos(instance * 2.399963)
        colors *= tint[:, None]
        colors[~np.isfinite(distance)] = SKY_COLOR
        colors += rng.normal(0.0, 0.02, size=colors.shape)

        rgb = np.clip(colors, 0.0, 1.0).reshape(camera.height, camera.width, 3)
        gt_mask = instance.reshape(camera.height, camera.width)
        return CameraFrame(
            rgb=rgb,
            gt_mask=gt_mask,
            intrinsics=camera.intrinsics,
            extrinsics=camera.extrinsics,
            frame_index=frame_index,
        )


def synthesize_scene(spec, threads=None):
    """Module-level shortcut for SceneSynthesisService.synthesize_scene."""
    return SceneSynthesisService(threads=threads).synthesize_scene(spec)
