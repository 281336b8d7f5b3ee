"""
Pretraining loop.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import ConfigurationError, DivergenceError, LossError, NumericalError
from core.utils import STREAM_TRAIN, rng_stream, run_validators
from core.validators import validate_choice, validate_non_negative, validate_range
from embed.checkpoints import save_checkpoint
from embed.normalization import fit_source_stats
from embed.services import ModelDims, PointModel
from objectives.losses import LossConfig

from .metrics import MetricsLog, step_record
from .optimizers import OPTIMIZER_KINDS, build_optimizer
from .steps import PairSample, compute_batch_loss, gradient_norm


logger = logging.getLogger(__name__)

LOG_EVERY = 50


def step_seed(seed, step):
    """Seed of the sampled terms at one pretraining step."""
    return int(rng_stream(seed, STREAM_TRAIN, 3, step).integers(2 ** 31))


@dataclass(frozen=True)
class TrainConfig:
    """
    Desk-scale defaults. ``batch_size`` counts frame pairs per step; pairs
    are drawn round-robin over the sources present.
    """

    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    optimizer: str = 'adam'
    weight_decay: float = 0.0
    momentum: float = 0.9
    temporal_gap: int = 1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    record_timing: bool = False

    def __post_init__(self):
        run_validators(self.steps, [validate_range(1, None, 'train.steps')])
        run_validators(self.batch_size, [validate_range(1, None, 'train.batch_size')])
        run_validators(self.lr, [validate_non_negative('train.lr')])
        run_validators(self.optimizer, [validate_choice(OPTIMIZER_KINDS, 'train.optimizer')])
        run_validators(self.temporal_gap, [validate_range(1, None, 'train.temporal_gap')])


@dataclass
class PretrainResult:
    model: PointModel
    records: list
    checkpoint: object = None

    @property
    def final_loss(self):
        return self.records[-1]['total'] if self.records else float('nan')


def initialize_model(sequences, dims=None, seed=0):
    """
    Fresh model whose source statistics are fitted on the given
    (pretraining) sequences only.
    """
    clouds = [cloud for sequence in sequences for cloud in sequence.clouds()]
    return PointModel.initialize(seed=seed, dims=dims or ModelDims(), stats=fit_source_stats(clouds))


class PairSampler:
    """Seeded (t, t + n) frame-pair sampler, round-robin over sources."""

    def __init__(self, scenes, temporal_gap=1, seed=0):
        self.temporal_gap = temporal_gap
        self.by_source = {}
        for scene in scenes:
            if len(scene) > temporal_gap:
                self.by_source.setdefault(scene.source_id, []).append(scene)
        if not self.by_source:
            raise ConfigurationError(
                f'No scene has more than {temporal_gap} frames.',
                code='TEMPORAL_GAP_TOO_LARGE',
                details={'temporal_gap': temporal_gap},
            )
        self.sources = sorted(self.by_source)
        self.rng = rng_stream(seed, STREAM_TRAIN, 0)

    def sample(self, batch_size):
        batch = []
        for index in range(batch_size):
            source = self.sources[index % len(self.sources)]
            scenes = self.by_source[source]
            scene = scenes[int(self.rng.integers(len(scenes)))]
            start = int(self.rng.integers(len(scene) - self.temporal_gap))
            batch.append(PairSample(source, scene.frames[start], scene.frames[start + self.temporal_gap]))
        return batch


def pretrain(model, scenes, config=None, metrics_path=None, checkpoint_path=None):
    """
    Optimize the point encoder and both heads; the image encoder stays frozen.

    Args:
        model: PointModel (fitted source stats)
        scenes: TrainingScene list from build_training_scenes
        config: TrainConfig
        metrics_path: Optional NDJSON metrics log path
        checkpoint_path: Optional checkpoint path written at the end

    Returns:
        PretrainResult

    Raises:
        DivergenceError: non-finite loss or gradient; the checkpoint path
            (when given) then holds the last good parameters
    """
    config = config or TrainConfig()
    sampler = PairSampler(scenes, config.temporal_gap, config.seed)
    parameters = model.parameters()
    optimizer = build_optimizer(config.optimizer, parameters, config.lr, config.weight_decay, config.momentum)
    extra = {'steps': config.steps, 'seed': config.seed}

    logger.info('Pretraining %d steps, batch %d, %s lr=%g', config.steps, config.batch_size, config.optimizer, config.lr)
    with MetricsLog(metrics_path) as metrics:
        for step in range(config.steps):
            started = time.perf_counter()
            batch = sampler.sample(config.batch_size)
            try:
                result = compute_batch_loss(model, batch, config.loss, seed=step_seed(config.seed, step))
            except LossError as exc:
                raise NumericalError(exc.message, code=exc.code, details={'step': step, **exc.details}) from exc
            norm = gradient_norm(result.gradients)

            if not (np.isfinite(result.value) and np.isfinite(norm)):
                last_good = parameters.copy()
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path, {**extra, 'diverged_at': step})
                raise DivergenceError(
                    f'Non-finite loss at step {step}.',
                    last_good=last_good,
                    step=step,
                    details={'loss': float(result.value)},
                )

            optimizer.step(result.gradients)
            wall_ms = (time.perf_counter() - started) * 1000.0 if config.record_timing else 0.0
            metrics.write(step_record(step, result.loss, norm, wall_ms))
            if step % LOG_EVERY == 0 or step == config.steps - 1:
                logger.info('step %d: total %.5f grad_norm %.4f', step, result.value, norm)
            else:
                logger.debug('step %d: total %.5f', step, result.value)

    checkpoint = save_checkpoint(model, checkpoint_path, extra) if checkpoint_path else None
    return PretrainResult(model=model, records=metrics.records, checkpoint=checkpoint)
