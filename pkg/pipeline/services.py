"""
Pipeline stages.

Each stage reads the outputs of earlier stages from the run directory,
writes its own outputs plus a resolved-config copy, and returns a stage
record. Stages raise PipelineException subclasses; the management commands
turn them into exit codes.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError

from core.exceptions import EXIT_OK, MissingInputError, NumericalError
from core.utils import ordered_map, read_json, require_paths, stage_record, write_json
from embed.checkpoints import load_checkpoint
from embed.services import PointModel
from geometry.services import pixel_indices, project_points
from geoseg.datatypes import SegmentAssignment
from geoseg.storage import read_segment_assignment, write_segment_assignment
from objectives.gradcheck import run_gradcheck
from scenes.presets import CLASS_NAMES, DEFAULT_SOURCES, default_scene_spec
from scenes.services import synthesize_scene
from scenes.storage import read_dataset, write_dataset
from superpixels.services import group_superpoints
from superpixels.storage import load_superpixel_map, write_superpixel_map
from training.data import build_training_scenes, compute_segments, compute_superpixels
from training.evaluation import cosine_map, corrupt_sequences, robustness_summary, write_cosine_map
from training.metrics import read_metrics, summarize_metrics
from training.probing import evaluate_linear_probe, fit_linear_probe, linear_probe, write_probe_report
from training.services import initialize_model, pretrain


logger = logging.getLogger(__name__)

SUBCOMMANDS = ('synth', 'superpixel', 'pairs', 'segment', 'pretrain', 'probe', 'gradcheck', 'corrupt', 'report')


@dataclass(frozen=True)
class RunPaths:
    """File layout of a run directory."""

    root: Path

    @property
    def dataset(self):
        return self.root / 'dataset'

    @property
    def superpixels(self):
        return self.root / 'superpixels'

    @property
    def pairs(self):
        return self.root / 'pairs'

    @property
    def segments(self):
        return self.root / 'segments'

    @property
    def pretrain(self):
        return self.root / 'pretrain'

    @property
    def checkpoint(self):
        return self.pretrain / 'checkpoint.ladck'

    @property
    def metrics(self):
        return self.pretrain / 'metrics.ndjson'

    @property
    def probe(self):
        return self.root / 'probe'

    @property
    def gradcheck(self):
        return self.root / 'gradcheck'

    @property
    def corrupt(self):
        return self.root / 'corrupt'

    @property
    def report(self):
        return self.root / 'report'

    def superpixel_file(self, scene_id, frame_index, root=None):
        return Path(root or self.superpixels) / scene_id / f'sp_{frame_index:06d}.bin'

    def segment_file(self, scene_id, frame_index):
        return self.segments / scene_id / f'seg_{frame_index:06d}.bin'


def _load_dataset(paths):
    require_paths(paths.dataset / 'manifest.json')
    return read_dataset(paths.dataset)


def _load_superpixels(paths, sequences):
    require_paths(paths.superpixels)
    return [
        [load_superpixel_map(paths.superpixel_file(sequence.scene_id, index)) for index in range(len(sequence))]
        for sequence in sequences
    ]


def _load_segments(paths, sequences):
    require_paths(paths.segments)
    assignments = []
    for sequence in sequences:
        views = [read_segment_assignment(paths.segment_file(sequence.scene_id, index))
                 for index in range(len(sequence))]
        labels = np.concatenate([view.labels for view in views])
        assignments.append(SegmentAssignment(
            labels=labels,
            segment_count=max(view.segment_count for view in views),
            per_frame_views=[view.labels for view in views],
        ))
    return assignments


def _load_model(paths):
    if not paths.checkpoint.exists():
        raise MissingInputError(
            f'No checkpoint at {paths.checkpoint}; run pretrain first.',
            details={'missing': [str(paths.checkpoint)]},
        )
    model, _ = load_checkpoint(paths.checkpoint)
    return model


# ============================================================================
# STAGES
# ============================================================================

def run_synth(config):
    """Synthesize the corpus: every configured source, ``scenes_per_source`` scenes each."""
    paths = RunPaths(config.out_dir)
    synth = config.synth
    specs = [
        default_scene_spec(config.seed, DEFAULT_SOURCES[name], index, num_frames=synth.num_frames,
                           azimuth_count=synth.azimuth_count, dynamic_fraction=synth.dynamic_fraction)
        for name in synth.sources
        for index in range(synth.scenes_per_source)
    ]
    sequences = ordered_map(synthesize_scene, specs, config.threads)
    manifest = write_dataset(sequences, paths.dataset)
    config.write_resolved(paths.dataset)
    return stage_record(
        'synth',
        sequences=len(sequences),
        frames=sum(len(s) for s in sequences),
        points=sum(len(cloud) for s in sequences for cloud in s.clouds()),
        path=str(paths.dataset),
        scenes=[entry['scene_id'] for entry in manifest['sequences']],
    )


def run_superpixel(config):
    """
    One superpixel map per frame. ``--baseline-slic`` forces SLIC maps; in
    ``file`` mode maps are read from ``superpixels.path`` and re-written.
    """
    paths = RunPaths(config.out_dir)
    sequences = _load_dataset(paths)
    params = config.superpixels
    use_file = params.mode == 'file' and not config.baseline_slic
    if use_file:
        require_paths(params.path)

    def build(sequence):
        if use_file:
            return [load_superpixel_map(paths.superpixel_file(sequence.scene_id, index, params.path))
                    for index in range(len(sequence))]
        return compute_superpixels(sequence, params, config.seed, slic=config.baseline_slic)

    all_maps = ordered_map(build, sequences, config.threads)
    segments = 0
    for sequence, maps in zip(sequences, all_maps):
        for index, superpixel_map in enumerate(maps):
            write_superpixel_map(superpixel_map, paths.superpixel_file(sequence.scene_id, index))
            segments += superpixel_map.segment_count
    config.write_resolved(paths.superpixels)
    return stage_record(
        'superpixel',
        mode='slic' if config.baseline_slic else params.mode,
        maps=sum(len(maps) for maps in all_maps),
        segments=segments,
        path=str(paths.superpixels),
    )


def run_pairs(config):
    """Superpixel/superpoint correspondences per frame, plus projection agreement."""
    paths = RunPaths(config.out_dir)
    sequences = _load_dataset(paths)
    maps = _load_superpixels(paths, sequences)

    frames = []
    agreeing = in_view = 0
    for sequence, sequence_maps in zip(sequences, maps):
        for index, ((cloud, camera), superpixel_map) in enumerate(zip(sequence, sequence_maps)):
            projections = project_points(cloud, camera)
            groups = group_superpoints(projections, superpixel_map)
            rows, cols = pixel_indices(projections)
            valid = projections.valid
            in_view += int(valid.sum())
            agreeing += int(np.sum(camera.gt_mask[rows[valid], cols[valid]] == cloud.gt_instance[valid]))
            frames.append({
                'scene_id': sequence.scene_id,
                'frame': index,
                'superpixels': superpixel_map.segment_count,
                'superpoints': len(groups),
                'empty_segments': len(groups.empty_segments),
                'covered_points': int(groups.point_count - len(groups.uncovered_points)),
                'uncovered_points': int(len(groups.uncovered_points)),
            })

    agreement = agreeing / in_view if in_view else 0.0
    write_json(paths.pairs / 'pairs.json', {'frames': frames, 'projection_agreement': agreement})
    config.write_resolved(paths.pairs)
    return stage_record(
        'pairs',
        frames=len(frames),
        superpoints=sum(frame['superpoints'] for frame in frames),
        projection_agreement=agreement,
        path=str(paths.pairs),
    )


def run_segment(config):
    """Ground removal and clustering on each sequence's aggregate; ids shared across frames."""
    paths = RunPaths(config.out_dir)
    sequences = _load_dataset(paths)
    geoseg = config.geoseg
    assignments = ordered_map(lambda s: compute_segments(s, geoseg.ransac, geoseg.cluster), sequences,
                              config.threads)

    summary = []
    for sequence, assignment in zip(sequences, assignments):
        for index, view in enumerate(assignment.per_frame_views):
            write_segment_assignment(
                SegmentAssignment(labels=view, segment_count=assignment.segment_count),
                paths.segment_file(sequence.scene_id, index),
            )
        summary.append({
            'scene_id': sequence.scene_id,
            'segments': assignment.segment_count,
            'ground_points': int(assignment.ground_mask.sum()) if assignment.ground_mask is not None else 0,
            'noise_points': int(assignment.noise_mask.sum()),
        })
    write_json(paths.segments / 'segments.json', {'sequences': summary})
    config.write_resolved(paths.segments)
    return stage_record(
        'segment',
        sequences=len(summary),
        segments=sum(entry['segments'] for entry in summary),
        path=str(paths.segments),
    )


def run_pretrain(config):
    paths = RunPaths(config.out_dir)
    sequences = _load_dataset(paths)
    superpixel_maps = _load_superpixels(paths, sequences)
    assignments = _load_segments(paths, sequences)

    model = initialize_model(sequences, config.model, config.seed)
    scenes = build_training_scenes(model, sequences, superpixel_maps, assignments, config.misalign, config.seed,
                                   config.threads)
    result = pretrain(model, scenes, config.train_config, paths.metrics, paths.checkpoint)
    config.write_resolved(paths.pretrain)
    return stage_record(
        'pretrain',
        steps=len(result.records),
        final_loss=result.final_loss,
        checkpoint=str(result.checkpoint),
        metrics=str(paths.metrics),
    )


def _probe(model, sequences, config, threads):
    return linear_probe(
        model,
        sequences,
        config.probe.budget,
        num_classes=len(CLASS_NAMES),
        seed=config.seed,
        point_level=config.probe.point_level,
        class_names=CLASS_NAMES,
        record_timing=config.timing,
        threads=threads,
    )


def _fit_probe(model, sequences, config, threads):
    return fit_linear_probe(
        model,
        sequences,
        config.probe.budget,
        num_classes=len(CLASS_NAMES),
        seed=config.seed,
        point_level=config.probe.point_level,
        threads=threads,
    )


def _random_model(model, config):
    """Untrained model of the same shape, normalizing with the same frozen stats."""
    return PointModel.initialize(seed=config.seed, dims=model.dims, stats=model.stats)


def run_probe(config):
    """Probe the pretrained encoder (and a random-init baseline); emit a cosine map."""
    paths = RunPaths(config.out_dir)
    model = _load_model(paths)
    sequences = _load_dataset(paths)

    pretrained = _probe(model, sequences, config, config.threads)
    write_probe_report(pretrained, paths.probe / 'pretrained')
    record = {'pretrained_miou': pretrained.miou}
    if config.probe.random_baseline:
        baseline = _probe(_random_model(model, config), sequences, config, config.threads)
        write_probe_report(baseline, paths.probe / 'random')
        record['random_miou'] = baseline.miou

    cloud = sequences[0][0][0]
    similarity = cosine_map(model, cloud, config.probe.query_index)
    write_cosine_map(paths.probe / 'cosine_map.csv', cloud, similarity)
    config.write_resolved(paths.probe)
    return stage_record('probe', path=str(paths.probe), **record)


def run_gradcheck_stage(config):
    """Finite-difference suite; a failed check is a numerical failure."""
    paths = RunPaths(config.out_dir)
    report = run_gradcheck(config.seed)
    write_json(paths.gradcheck / 'gradcheck.json', {
        'passed': report.passed,
        'checks': report.summary(),
        'seconds': report.seconds if config.timing else 0.0,
    })
    config.write_resolved(paths.gradcheck)
    if not report.passed:
        failures = report.failures()
        raise NumericalError(
            f'{len(failures)} gradient checks failed.',
            code='GRADCHECK_FAILED',
            details={'failed': sorted({case.check for case in failures})},
        )
    return stage_record('gradcheck', cases=len(report.cases), path=str(paths.gradcheck))


def run_corrupt(config):
    """
    Score pretrained and random-init encoders on every configured corruption.

    Each encoder's classifier is fitted once on the clean training split and
    then scored, unchanged, on the clean and every corrupted held-out set.
    """
    paths = RunPaths(config.out_dir)
    model = _load_model(paths)
    baseline_model = _random_model(model, config)
    sequences = _load_dataset(paths)

    fitted = _fit_probe(model, sequences, config, config.threads)
    baseline_fitted = _fit_probe(baseline_model, sequences, config, config.threads)
    clean = evaluate_linear_probe(model, fitted, sequences, CLASS_NAMES, config.timing, config.threads)
    corrupted, baseline, cases = {}, {}, []
    for kind in config.corrupt.kinds:
        for severity in config.corrupt.severities:
            data = corrupt_sequences(sequences, kind, severity, config.seed)
            corrupted[(kind, severity)] = evaluate_linear_probe(model, fitted, data, threads=config.threads).miou
            baseline[(kind, severity)] = evaluate_linear_probe(baseline_model, baseline_fitted, data,
                                                               threads=config.threads).miou
            cases.append({
                'kind': kind,
                'severity': severity,
                'pretrained_miou': corrupted[(kind, severity)],
                'random_miou': baseline[(kind, severity)],
            })
            logger.info('%s/%d: pretrained %.4f random %.4f', kind, severity,
                        corrupted[(kind, severity)], baseline[(kind, severity)])

    summary = robustness_summary(clean.miou, corrupted, baseline)
    write_json(paths.corrupt / 'robustness.json', {'clean_miou': clean.miou, 'cases': cases, **summary})
    config.write_resolved(paths.corrupt)
    return stage_record('corrupt', cases=len(cases), mce=summary['mce'], mrr=summary['mrr'],
                        path=str(paths.corrupt))


def run_report(config):
    """Summary table (CSV and text) from the metrics log, probe reports and robustness results."""
    paths = RunPaths(config.out_dir)
    rows = []
    if paths.metrics.exists():
        for key, value in summarize_metrics(read_metrics(paths.metrics)).items():
            rows.append(('pretrain', key, value))
    for name in ('pretrained', 'random'):
        report_path = paths.probe / name / 'report.json'
        if report_path.exists():
            report = read_json(report_path)
            rows.append((f'probe_{name}', 'miou', report['miou']))
            for index, iou in enumerate(report['iou']):
                rows.append((f'probe_{name}', f'iou_{CLASS_NAMES.get(index, index)}', iou))
    robustness_path = paths.corrupt / 'robustness.json'
    if robustness_path.exists():
        robustness = read_json(robustness_path)
        rows.append(('corrupt', 'mce', robustness['mce']))
        rows.append(('corrupt', 'mrr', robustness['mrr']))
    if not rows:
        raise MissingInputError(
            f'Nothing to report in {paths.root}; run pretrain or probe first.',
            details={'missing': [str(paths.metrics), str(paths.probe)]},
        )

    scores = {(section, key): value for section, key, value in rows}
    gap = None
    pretrained, baseline = scores.get(('probe_pretrained', 'miou')), scores.get(('probe_random', 'miou'))
    if pretrained is not None and baseline is not None:
        gap = pretrained - baseline
        rows.append(('probe', 'miou_gain', gap))

    paths.report.mkdir(parents=True, exist_ok=True)
    csv_lines = ['section,metric,value'] + [f'{s},{k},{_format(v)}' for s, k, v in rows]
    (paths.report / 'summary.csv').write_text('\n'.join(csv_lines) + '\n')
    width = max(len(f'{s}.{k}') for s, k, _ in rows)
    text_lines = [f'{f"{s}.{k}":<{width}}  {_format(v)}' for s, k, v in rows]
    (paths.report / 'summary.txt').write_text('\n'.join(text_lines) + '\n')
    config.write_resolved(paths.report)
    return stage_record('report', rows=len(rows), miou_gain=gap, path=str(paths.report))


def _format(value):
    if value is None:
        return 'n/a'
    if isinstance(value, float):
        return f'{value:.6f}'
    return str(value)


STAGES = {
    'synth': run_synth,
    'superpixel': run_superpixel,
    'pairs': run_pairs,
    'segment': run_segment,
    'pretrain': run_pretrain,
    'probe': run_probe,
    'gradcheck': run_gradcheck_stage,
    'corrupt': run_corrupt,
    'report': run_report,
}


def run_subcommand(name, args=()):
    """
    Run one subcommand in-process.

    Returns:
        The exit code the command would return from the command line
    """
    if name not in SUBCOMMANDS:
        logger.error('Unknown subcommand %s', name)
        return 1
    try:
        call_command(name, *args)
    except CommandError as exc:
        return exc.returncode
    return EXIT_OK
