"""
Run configuration.

A RunConfig binds the parameters of every stage. It is read from a JSON
file; unknown keys at any level are rejected, and every stage writes the
fully-defaulted result as ``resolved_config.json`` next to its outputs.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import orjson
from django.conf import settings

from core.exceptions import ConfigurationError, MissingInputError
from core.utils import run_validators, write_json
from core.validators import validate_choice, validate_fraction, validate_range
from embed.services import ModelDims
from geoseg.datatypes import ClusterParams, RansacParams
from objectives.losses import LossConfig
from scenes.presets import DEFAULT_SOURCES
from training.data import SuperpixelParams
from training.evaluation import CORRUPTION_KINDS, SEVERITIES
from training.services import TrainConfig


logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = 'resolved_config.json'

# Taken from the run level; setting them inside "train" is an error.
RUN_LEVEL_TRAIN_KEYS = ('seed', 'loss', 'record_timing')


@dataclass(frozen=True)
class SynthConfig:
    sources: tuple = ('A', 'B')
    scenes_per_source: int = 10
    num_frames: int = 2
    azimuth_count: int = 720
    dynamic_fraction: float = 0.0

    def __post_init__(self):
        for name in self.sources:
            run_validators(name, [validate_choice(tuple(DEFAULT_SOURCES), 'synth.sources')])
        run_validators(self.scenes_per_source, [validate_range(1, None, 'synth.scenes_per_source')])
        run_validators(self.num_frames, [validate_range(1, None, 'synth.num_frames')])
        run_validators(self.azimuth_count, [validate_range(1, None, 'synth.azimuth_count')])
        run_validators(self.dynamic_fraction, [validate_range(0, 1, 'synth.dynamic_fraction')])


@dataclass(frozen=True)
class SuperpixelConfig(SuperpixelParams):
    """Superpixel parameters plus the directory read in ``file`` mode."""

    path: str = ''


@dataclass(frozen=True)
class GeosegConfig:
    ransac: RansacParams = field(default_factory=RansacParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)


@dataclass(frozen=True)
class ProbeConfig:
    budget: float = 0.1
    point_level: bool = False
    query_index: int = 0
    random_baseline: bool = True

    def __post_init__(self):
        run_validators(self.budget, [validate_fraction('probe.budget')])
        run_validators(self.query_index, [validate_range(0, None, 'probe.query_index')])


@dataclass(frozen=True)
class CorruptConfig:
    kinds: tuple = CORRUPTION_KINDS
    severities: tuple = SEVERITIES

    def __post_init__(self):
        for kind in self.kinds:
            run_validators(kind, [validate_choice(CORRUPTION_KINDS, 'corrupt.kinds')])
        for severity in self.severities:
            run_validators(severity, [validate_choice(SEVERITIES, 'corrupt.severities')])


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = 'out'
    threads: int = 1
    baseline_slic: bool = False
    misalign: tuple = None
    timing: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    superpixels: SuperpixelConfig = field(default_factory=SuperpixelConfig)
    geoseg: GeosegConfig = field(default_factory=GeosegConfig)
    model: ModelDims = field(default_factory=ModelDims)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    corrupt: CorruptConfig = field(default_factory=CorruptConfig)

    def __post_init__(self):
        run_validators(self.seed, [validate_range(0, 2 ** 64 - 1, 'seed')])
        run_validators(self.threads, [validate_range(1, None, 'threads')])
        if self.misalign is not None:
            if len(self.misalign) != 2:
                raise ConfigurationError('misalign takes two fractions: translation and rotation.',
                                         code='BAD_MISALIGNMENT')
            for fraction in self.misalign:
                run_validators(fraction, [validate_range(0, 1, 'misalign')])

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def loss_config(self):
        """Loss settings with the run-level baseline switch applied."""
        return dataclasses.replace(self.loss, baseline_slic=self.baseline_slic)

    @property
    def train_config(self):
        return dataclasses.replace(self.train, seed=self.seed, loss=self.loss_config, record_timing=self.timing)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {}, '')

    @classmethod
    def load(cls, path=None, **overrides):
        """
        Read a config file (or start from defaults) and apply flag overrides.

        ``None`` overrides are ignored.
        """
        data = {
            'seed': settings.LAD_SEED,
            'out': str(settings.LAD_OUTPUT_DIR),
            'threads': settings.LAD_THREADS,
            'timing': settings.LAD_RECORD_TIMING,
        }
        if path:
            path = Path(path)
            if not path.exists():
                raise MissingInputError(f'Config file {path} does not exist.', details={'path': str(path)})
            try:
                loaded = orjson.loads(path.read_bytes())
            except orjson.JSONDecodeError as exc:
                raise ConfigurationError(f'{path}: invalid JSON ({exc}).', code='INVALID_JSON') from exc
            if not isinstance(loaded, dict):
                raise ConfigurationError(f'{path}: the top level must be an object.', code='INVALID_JSON')
            data.update(loaded)
        data.update({key: value for key, value in overrides.items() if value is not None})
        return cls.from_dict(data)

    def resolved(self):
        """Plain dict that from_dict accepts back unchanged."""
        plain = _to_plain(self)
        for key in RUN_LEVEL_TRAIN_KEYS:
            plain['train'].pop(key)
        return plain

    def write_resolved(self, directory):
        path = write_json(Path(directory) / RESOLVED_CONFIG_NAME, self.resolved())
        logger.debug('Resolved config written to %s', path)
        return path


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigurationError(f'Section "{prefix or "root"}" must be an object.', code='INVALID_CONFIG')
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if cls is TrainConfig:
        unknown = sorted(set(unknown) | (set(data) & set(RUN_LEVEL_TRAIN_KEYS)))
    if unknown:
        raise ConfigurationError(
            f'Unknown config key "{prefix}{unknown[0]}".',
            code='UNKNOWN_CONFIG_KEY',
            details={'unknown': [prefix + key for key in unknown]},
        )

    values = {}
    for name, value in data.items():
        default = _default(fields[name])
        if dataclasses.is_dataclass(default):
            values[name] = _build(type(default), value, f'{prefix}{name}.')
        elif isinstance(value, list):
            values[name] = tuple(value)
        else:
            values[name] = value
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f'Invalid section "{prefix or "root"}": {exc}', code='INVALID_CONFIG') from exc


def _default(config_field):
    if config_field.default_factory is not dataclasses.MISSING:
        return config_field.default_factory()
    return config_field.default


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_plain(item) for item in value]
    return value
