"""
Linear probing of a frozen point encoder and the mIoU report.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.exceptions import ConfigurationError
from core.utils import STREAM_PROBE, ordered_map, rng_stream, run_validators, write_json
from core.validators import validate_fraction, validate_range


logger = logging.getLogger(__name__)

PROBE_TOLERANCE = 1e-6
PROBE_MAX_ITERATIONS = 2000
PROBE_L2 = 1e-4
EVAL_FRACTION = 0.3


# ============================================================================
# REPORT
# ============================================================================

def confusion_matrix(predictions, labels, num_classes):
    """Rows are ground truth, columns are predictions."""
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    valid = (labels >= 0) & (labels < num_classes)
    counts = np.bincount(num_classes * labels[valid] + predictions[valid], minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


def iou_from_confusion(confusion):
    """
    Per-class IoU and the mIoU over classes present in the ground truth.

    Classes without ground-truth points get NaN and stay out of the mean.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    intersection = np.diag(confusion)
    present = confusion.sum(axis=1) > 0
    union = confusion.sum(axis=1) + confusion.sum(axis=0) - intersection
    iou = np.full(len(confusion), np.nan)
    iou[present] = intersection[present] / union[present]
    miou = float(np.mean(iou[present])) if np.any(present) else float('nan')
    return iou, miou


@dataclass
class ProbeReport:
    """
    ``absent_classes`` were missing from the training subset; the probe
    never predicts them.
    """

    confusion: np.ndarray
    iou: np.ndarray
    miou: float
    accuracy: np.ndarray
    runtime_seconds: float = 0.0
    absent_classes: list = field(default_factory=list)
    class_names: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.confusion)

    def to_dict(self):
        def clean(values):
            return [None if np.isnan(v) else float(v) for v in values]

        return {
            'miou': None if np.isnan(self.miou) else float(self.miou),
            'iou': clean(self.iou),
            'accuracy': clean(self.accuracy),
            'confusion': self.confusion.astype(np.int64).tolist(),
            'absent_classes': list(self.absent_classes),
            'runtime_seconds': float(self.runtime_seconds),
            'details': self.details,
        }

    def as_text(self):
        lines = [f'mIoU: {self.miou:.4f}', '', f'{"class":<12} {"IoU":>8} {"accuracy":>9}']
        for index in range(self.num_classes):
            name = self.class_names.get(index, str(index))
            iou = 'n/a' if np.isnan(self.iou[index]) else f'{self.iou[index]:.4f}'
            accuracy = 'n/a' if np.isnan(self.accuracy[index]) else f'{self.accuracy[index]:.4f}'
            flag = '  (absent from training subset)' if index in self.absent_classes else ''
            lines.append(f'{name:<12} {iou:>8} {accuracy:>9}{flag}')
        lines.append('')
        for key, value in sorted(self.details.items()):
            lines.append(f'{key}: {value}')
        lines.append(f'runtime_seconds: {self.runtime_seconds:.3f}')
        return '\n'.join(lines) + '\n'


def compute_probe_report(predictions, labels, num_classes, runtime_seconds=0.0, absent_classes=(),
                         class_names=None, details=None):
    confusion = confusion_matrix(predictions, labels, num_classes)
    iou, miou = iou_from_confusion(confusion)
    totals = confusion.sum(axis=1)
    accuracy = np.full(num_classes, np.nan)
    accuracy[totals > 0] = np.diag(confusion)[totals > 0] / totals[totals > 0]
    return ProbeReport(
        confusion=confusion,
        iou=iou,
        miou=miou,
        accuracy=accuracy,
        runtime_seconds=runtime_seconds,
        absent_classes=sorted(int(c) for c in absent_classes),
        class_names=class_names or {},
        details=details or {},
    )


def write_probe_report(report, directory):
    """report.txt, report.json and confusion.csv in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / 'report.txt').write_text(report.as_text())
    write_json(directory / 'report.json', report.to_dict())
    header = ','.join(report.class_names.get(i, str(i)) for i in range(report.num_classes))
    np.savetxt(directory / 'confusion.csv', report.confusion, fmt='%d', delimiter=',', header=header, comments='')
    return directory


# ============================================================================
# CLASSIFIER
# ============================================================================

class LinearProbe:
    """
    Multinomial logistic regression fitted by full-batch gradient descent.

    Inputs are standardized with training-set statistics; the step size is
    the inverse Lipschitz constant of the loss.
    """

    def __init__(self, num_classes, tolerance=PROBE_TOLERANCE, max_iterations=PROBE_MAX_ITERATIONS, l2=PROBE_L2):
        self.num_classes = num_classes
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.l2 = l2
        self.weights = None
        self.mean = None
        self.std = None
        self.trainable = None
        self.iterations = 0
        self.loss = float('nan')

    def _design(self, features):
        standardized = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return np.hstack([standardized, np.ones((len(standardized), 1))])

    def _logits(self, design):
        logits = design @ self.weights
        logits[:, ~self.trainable] = -np.inf
        return logits

    def fit(self, features, labels):
        labels = np.asarray(labels, dtype=np.int64)
        self.trainable = np.bincount(labels, minlength=self.num_classes)[:self.num_classes] > 0
        self.mean = features.mean(axis=0)
        self.std = np.maximum(features.std(axis=0), 1e-8)
        design = self._design(features)
        rows = len(design)
        one_hot = np.zeros((rows, self.num_classes))
        one_hot[np.arange(rows), labels] = 1.0
        self.weights = np.zeros((design.shape[1], self.num_classes))
        step = 1.0 / (0.5 * np.linalg.norm(design, 2) ** 2 / rows + self.l2)

        previous = np.inf
        for iteration in range(1, self.max_iterations + 1):
            logits = self._logits(design)
            logits -= logits.max(axis=1, keepdims=True)
            exp = np.exp(logits)
            totals = exp.sum(axis=1, keepdims=True)
            loss = -float(np.mean((logits - np.log(totals))[np.arange(rows), labels]))
            loss += 0.5 * self.l2 * float((self.weights ** 2).sum())
            grad = design.T @ (exp / totals - one_hot) / rows + self.l2 * self.weights
            grad[:, ~self.trainable] = 0.0
            self.weights -= step * grad
            self.iterations = iteration
            self.loss = loss
            if abs(previous - loss) < self.tolerance:
                break
            previous = loss
        logger.debug('Probe converged after %d iterations (loss %.6f)', self.iterations, self.loss)
        return self

    def predict(self, features):
        return np.argmax(self._logits(self._design(features)), axis=1)


# ============================================================================
# PROTOCOL
# ============================================================================

@dataclass
class ProbeSplit:
    train: list
    evaluation: list
    point_fraction: float = 1.0


def split_probe_frames(sequences, budget, seed=0, point_level=False, eval_fraction=EVAL_FRACTION):
    """
    Held-out evaluation scenes plus a budget-sampled training subset.

    Whole scenes are held out so that no evaluation frame has a temporal
    neighbour in training. With ``point_level`` every training frame is kept
    and ``budget`` applies to points instead.

    Returns:
        ProbeSplit of (sequence index, frame index) pairs
    """
    run_validators(budget, [validate_fraction('budget')])
    run_validators(eval_fraction, [validate_range(0, 1, 'eval_fraction', inclusive_max=False)])
    if len(sequences) < 2:
        raise ConfigurationError('Probing needs at least two scenes.', code='TOO_FEW_SCENES')

    rng = rng_stream(seed, STREAM_PROBE, 0)
    order = rng.permutation(len(sequences))
    held_out = max(1, int(round(eval_fraction * len(sequences))))
    evaluation_scenes = sorted(order[:held_out].tolist())
    train_scenes = sorted(order[held_out:].tolist())

    pool = [(scene, frame) for scene in train_scenes for frame in range(len(sequences[scene]))]
    evaluation = [(scene, frame) for scene in evaluation_scenes for frame in range(len(sequences[scene]))]
    if point_level:
        return ProbeSplit(train=pool, evaluation=evaluation, point_fraction=budget)
    count = max(1, int(round(budget * len(pool))))
    chosen = np.sort(rng.choice(len(pool), size=count, replace=False))
    return ProbeSplit(train=[pool[i] for i in chosen], evaluation=evaluation)


def _frame_features(model, sequences, frames, threads=None):
    def encode(item):
        cloud = sequences[item[0]][item[1]][0]
        return model.point_features(cloud), cloud.gt_semantic

    encoded = ordered_map(encode, frames, threads)
    features = np.concatenate([f for f, _ in encoded]) if encoded else np.zeros((0, model.encoder.output_dim))
    labels = np.concatenate([l for _, l in encoded]) if encoded else np.zeros(0, dtype=np.int64)
    return features, labels


@dataclass
class FittedProbe:
    """A classifier fitted on one model's features, with the split it was fitted on."""

    probe: LinearProbe
    split: ProbeSplit
    train_points: int
    budget: float
    point_level: bool = False
    runtime_seconds: float = 0.0

    @property
    def absent_classes(self):
        return np.flatnonzero(~self.probe.trainable).tolist()


def fit_linear_probe(model, sequences, budget, num_classes, seed=0, point_level=False, threads=None):
    """
    Fit a linear classifier on the frozen features of the training split.

    Returns:
        FittedProbe
    """
    started = time.perf_counter()
    split = split_probe_frames(sequences, budget, seed, point_level)
    train_features, train_labels = _frame_features(model, sequences, split.train, threads)
    if split.point_fraction < 1.0:
        rng = rng_stream(seed, STREAM_PROBE, 1)
        count = max(1, int(round(split.point_fraction * len(train_labels))))
        chosen = np.sort(rng.choice(len(train_labels), size=count, replace=False))
        train_features, train_labels = train_features[chosen], train_labels[chosen]

    probe = LinearProbe(num_classes).fit(train_features, train_labels)
    fitted = FittedProbe(probe, split, int(len(train_labels)), budget, point_level,
                         time.perf_counter() - started)
    if fitted.absent_classes:
        logger.warning('Classes %s absent from the probe training subset', fitted.absent_classes)
    return fitted


def evaluate_linear_probe(model, fitted, sequences, class_names=None, record_timing=False, threads=None):
    """
    Score a fitted classifier on the held-out frames of ``sequences``.

    ``sequences`` may be a corrupted copy of the data the classifier was
    fitted on; frames are addressed by the same (scene, frame) indices.

    Returns:
        ProbeReport
    """
    started = time.perf_counter()
    num_classes = fitted.probe.num_classes
    eval_features, eval_labels = _frame_features(model, sequences, fitted.split.evaluation, threads)
    predictions = fitted.probe.predict(eval_features)
    runtime = fitted.runtime_seconds + time.perf_counter() - started if record_timing else 0.0
    report = compute_probe_report(
        predictions, eval_labels, num_classes, runtime, fitted.absent_classes, class_names,
        details={
            'budget': fitted.budget,
            'point_level': fitted.point_level,
            'train_frames': len(fitted.split.train),
            'eval_frames': len(fitted.split.evaluation),
            'train_points': fitted.train_points,
            'eval_points': int(len(eval_labels)),
            'iterations': fitted.probe.iterations,
        },
    )
    logger.info('Linear probe mIoU %.4f (%d train points, %d eval points)',
                report.miou, fitted.train_points, len(eval_labels))
    return report


def linear_probe(model, sequences, budget, num_classes, seed=0, point_level=False, class_names=None,
                 record_timing=False, threads=None):
    """
    Fit a linear classifier on frozen encoder features and evaluate it.

    Args:
        model: PointModel (its frozen source stats normalize the probe data)
        sequences: Labeled SceneSequence list
        budget: Fraction in (0, 1] of training frames (or points)
        num_classes: Number of semantic classes
        seed: Probe seed (split and point sampling)
        record_timing: Fill ``runtime_seconds``; otherwise it stays 0

    Returns:
        ProbeReport on the held-out scenes
    """
    fitted = fit_linear_probe(model, sequences, budget, num_classes, seed, point_level, threads)
    return evaluate_linear_probe(model, fitted, sequences, class_names, record_timing, threads)
