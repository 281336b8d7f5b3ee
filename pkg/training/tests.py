import tempfile
from pathlib import Path

import numpy as np
import orjson
import pytest
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DatasetFormatError, MissingInputError
from embed.checkpoints import load_checkpoint
from embed.datatypes import ParameterSet
from embed.services import ModelDims
from geoseg.datatypes import ClusterParams
from objectives.losses import LossConfig, LossResult, total_loss
from scenes.factories import SceneSpecFactory, SourceProfileFactory
from scenes.services import synthesize_scene
from training.data import (
    SuperpixelParams,
    TrainingScene,
    build_training_scenes,
    compute_segments,
    compute_superpixels,
)
from training.evaluation import (
    corrupt,
    corrupt_sequences,
    cosine_map,
    instance_similarity,
    ring_ids,
    robustness_summary,
    write_cosine_map,
)
from training.metrics import MetricsLog, moving_average, read_metrics, step_record, summarize_metrics
from training.optimizers import Adam, SGDMomentum, build_optimizer
from training.probing import (
    LinearProbe,
    compute_probe_report,
    evaluate_linear_probe,
    fit_linear_probe,
    linear_probe,
    split_probe_frames,
    write_probe_report,
)
from training.services import PairSampler, TrainConfig, initialize_model, pretrain, step_seed
from training.steps import compute_batch_loss, gradient_norm


SMALL_DIMS = ModelDims(feature_dim=2, hidden_dim=8, point_dim=8, embedding_dim=4, image_dim=6, image_stride=2)
CLUSTER = ClusterParams(eps=1.5, min_pts=3, min_segment_size=3)


def two_source_corpus():
    return [
        synthesize_scene(SceneSpecFactory(source_profile=SourceProfileFactory())),
        synthesize_scene(SceneSpecFactory(
            source_profile=SourceProfileFactory(source_id=2, intensity_range=(0.0, 1.0), name='B'),
        )),
    ]


def training_inputs(sequences, dims=SMALL_DIMS, seed=0):
    model = initialize_model(sequences, dims, seed)
    maps = [compute_superpixels(sequence, SuperpixelParams()) for sequence in sequences]
    segments = [compute_segments(sequence, cluster=CLUSTER) for sequence in sequences]
    return model, build_training_scenes(model, sequences, maps, segments)


def parameter_set(*values):
    return ParameterSet({'w': np.array(values, dtype=np.float64)})


class OptimizerTests(SimpleTestCase):

    def test_zero_learning_rate_is_a_no_op(self):
        for kind in ('adam', 'sgd-momentum'):
            parameters = parameter_set(1.0, -2.0)
            optimizer = build_optimizer(kind, parameters, lr=0.0)
            optimizer.step({'w': np.array([0.3, -0.7])})
            np.testing.assert_array_equal(parameters['w'], [1.0, -2.0])

    def test_sgd_momentum(self):
        parameters = parameter_set(1.0)
        optimizer = SGDMomentum(parameters, lr=0.1, momentum=0.9)
        optimizer.step({'w': np.array([1.0])})
        np.testing.assert_allclose(parameters['w'], [0.9])
        optimizer.step({'w': np.array([1.0])})
        np.testing.assert_allclose(parameters['w'], [0.71])

    def test_adam_first_step_is_lr_sized(self):
        parameters = parameter_set(1.0, 1.0)
        Adam(parameters, lr=0.1).step({'w': np.array([4.0, -0.01])})
        np.testing.assert_allclose(parameters['w'], [0.9, 1.1], atol=1e-6)

    def test_decoupled_weight_decay(self):
        parameters = parameter_set(1.0)
        Adam(parameters, lr=0.1, weight_decay=0.5).step({'w': np.array([0.0])})
        np.testing.assert_allclose(parameters['w'], [0.95])

    def test_updates_in_place(self):
        parameters = parameter_set(1.0)
        array = parameters['w']
        build_optimizer('sgd-momentum', parameters, lr=0.5).step({'w': np.array([1.0])})
        self.assertIs(parameters['w'], array)
        np.testing.assert_allclose(array, [0.5])

    def test_unknown_optimizer(self):
        with self.assertRaises(ConfigurationError) as ctx:
            build_optimizer('rmsprop', parameter_set(1.0), lr=0.1)
        self.assertEqual(ctx.exception.code, 'UNKNOWN_OPTIMIZER')

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigurationError):
            Adam(parameter_set(1.0), lr=-1e-3)


class MetricsTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_step_record(self):
        loss = total_loss({'vfm': LossResult(0.5, None), 'p2s': LossResult(0.25, None)})
        record = step_record(3, loss, 2.0)
        self.assertEqual(record, {
            'step': 3, 'l_vfm': 0.5, 'l_tmp': 0.0, 'l_p2s': 0.25, 'l_cdp': 0.0,
            'total': 0.75, 'grad_norm': 2.0, 'wall_ms': 0.0,
        })

    def test_slic_term_is_logged_as_spatial(self):
        loss = total_loss({'slic': LossResult(0.4, None)}, LossConfig(baseline_slic=True))
        self.assertEqual(step_record(0, loss, 0.0)['l_vfm'], 0.4)

    def test_log_round_trip(self):
        path = self.root / 'pretrain' / 'metrics.ndjson'
        records = [{'step': step, 'total': 1.0 / (step + 1), 'grad_norm': 0.1} for step in range(3)]
        with MetricsLog(path) as log:
            for record in records:
                log.write(record)
        self.assertEqual(read_metrics(path), records)
        self.assertEqual(len(path.read_bytes().splitlines()), 3)

    def test_missing_and_malformed_logs(self):
        with self.assertRaises(MissingInputError):
            read_metrics(self.root / 'absent.ndjson')
        path = self.root / 'bad.ndjson'
        path.write_bytes(b'{"step": 0}\n{not json\n')
        with self.assertRaises(DatasetFormatError):
            read_metrics(path)

    def test_moving_average(self):
        np.testing.assert_allclose(moving_average([1.0, 2.0, 3.0, 4.0], 2), [1.0, 1.5, 2.5, 3.5])
        self.assertEqual(len(moving_average([], 5)), 0)

    def test_summary(self):
        records = [{'total': value, 'grad_norm': 0.5} for value in (4.0, 2.0, 1.0, 1.0)]
        summary = summarize_metrics(records, window=2)
        self.assertEqual(summary['steps'], 4)
        self.assertEqual(summary['first_total'], 3.0)
        self.assertEqual(summary['last_total'], 1.0)
        self.assertEqual(summarize_metrics([]), {'steps': 0})


class PairSamplerTests(SimpleTestCase):

    def make_scene(self, source_id, frames=2):
        return TrainingScene(scene_id=f'scene_{source_id}', source_id=source_id,
                             frames=[f'{source_id}:{index}' for index in range(frames)])

    def test_round_robin_over_sources(self):
        sampler = PairSampler([self.make_scene(2), self.make_scene(1)], seed=3)
        batch = sampler.sample(4)
        self.assertEqual([pair.source_id for pair in batch], [1, 2, 1, 2])
        self.assertEqual((batch[0].current, batch[0].following), ('1:0', '1:1'))

    def test_gap_respects_scene_length(self):
        sampler = PairSampler([self.make_scene(1, frames=5)], temporal_gap=3, seed=0)
        for pair in sampler.sample(10):
            first, second = int(pair.current.split(':')[1]), int(pair.following.split(':')[1])
            self.assertEqual(second - first, 3)

    def test_gap_too_large(self):
        with self.assertRaises(ConfigurationError) as ctx:
            PairSampler([self.make_scene(1)], temporal_gap=2)
        self.assertEqual(ctx.exception.code, 'TEMPORAL_GAP_TOO_LARGE')

    def test_config_is_validated(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(optimizer='rmsprop')
        with self.assertRaises(ConfigurationError):
            TrainConfig(steps=0)


class PretrainTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sequences = two_source_corpus()

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_scenes_keep_frame_order(self):
        _, scenes = training_inputs(self.sequences)
        self.assertEqual([scene.source_id for scene in scenes], [1, 2])
        for scene, sequence in zip(scenes, self.sequences):
            self.assertEqual(len(scene), len(sequence))
            for frame in scene.frames:
                self.assertEqual(len(frame.segments), len(frame.cloud))
                self.assertEqual(frame.groups.point_count, len(frame.cloud))

    def test_batch_gradients_cover_every_parameter(self):
        model, scenes = training_inputs(self.sequences)
        batch = PairSampler(scenes).sample(2)
        result = compute_batch_loss(model, batch)
        self.assertEqual(set(result.gradients), set(model.parameters()))
        self.assertTrue(np.isfinite(gradient_norm(result.gradients)))
        value_only = compute_batch_loss(model, batch, compute_gradients=False)
        self.assertIsNone(value_only.gradients)
        self.assertEqual(value_only.value, result.value)

    def test_literal_point_to_segment_draw_follows_the_step_seed(self):
        model, scenes = training_inputs(self.sequences)
        batch = PairSampler(scenes).sample(2)
        config = LossConfig(p2s_mode='literal')
        first = compute_batch_loss(model, batch, config, compute_gradients=False, seed=step_seed(0, 0))
        again = compute_batch_loss(model, batch, config, compute_gradients=False, seed=step_seed(0, 0))
        other = compute_batch_loss(model, batch, config, compute_gradients=False, seed=step_seed(0, 1))
        self.assertEqual(first.loss.component('p2s'), again.loss.component('p2s'))
        self.assertNotEqual(first.loss.component('p2s'), other.loss.component('p2s'))
        self.assertNotEqual(step_seed(0, 0), step_seed(0, 1))

    def test_zero_learning_rate_keeps_parameters(self):
        model, scenes = training_inputs(self.sequences)
        before = model.parameters().copy()
        result = pretrain(model, scenes, TrainConfig(steps=3, batch_size=2, lr=0.0))
        self.assertEqual(len(result.records), 3)
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[name])

    def test_same_seed_same_metrics(self):
        runs = []
        for _ in range(2):
            model, scenes = training_inputs(self.sequences)
            runs.append(pretrain(model, scenes, TrainConfig(steps=3, batch_size=2, seed=5)).records)
        self.assertEqual(runs[0], runs[1])
        self.assertTrue(all(record['wall_ms'] == 0.0 for record in runs[0]))

    def test_outputs_are_written(self):
        model, scenes = training_inputs(self.sequences)
        metrics_path = self.root / 'metrics.ndjson'
        checkpoint_path = self.root / 'checkpoint.ladck'
        result = pretrain(model, scenes, TrainConfig(steps=2, batch_size=2), metrics_path, checkpoint_path)
        self.assertEqual(read_metrics(metrics_path), result.records)
        loaded, extra = load_checkpoint(checkpoint_path)
        self.assertEqual(extra['steps'], 2)
        self.assertEqual(loaded.dims, SMALL_DIMS)

    @pytest.mark.slow
    def test_loss_decreases(self):
        sequences = [
            synthesize_scene(SceneSpecFactory(source_profile=SourceProfileFactory(source_id=source, name=str(source))))
            for source in (1, 2) for _ in range(3)
        ]
        model, scenes = training_inputs(sequences, dims=ModelDims(hidden_dim=32, point_dim=32, embedding_dim=16))
        result = pretrain(model, scenes, TrainConfig(steps=200, batch_size=4, lr=1e-3))
        summary = summarize_metrics(result.records)
        self.assertLess(summary['last_total'], summary['first_total'])


class ProbeReportTests(SimpleTestCase):

    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 2, 1])
        report = compute_probe_report(labels, labels, 3)
        self.assertEqual(report.miou, 1.0)
        np.testing.assert_array_equal(report.iou, [1.0, 1.0, 1.0])

    def test_single_class_prediction(self):
        report = compute_probe_report(np.zeros(4), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_allclose(report.iou, [0.5, 0.0])
        self.assertAlmostEqual(report.miou, 0.25)
        np.testing.assert_array_equal(report.confusion, [[2, 0], [2, 0]])

    def test_classes_absent_from_ground_truth(self):
        report = compute_probe_report(np.zeros(4), np.array([0, 0, 1, 1]), 3)
        self.assertTrue(np.isnan(report.iou[2]))
        self.assertAlmostEqual(report.miou, 0.25)
        self.assertIsNone(report.to_dict()['iou'][2])

    def test_report_files(self):
        report = compute_probe_report(np.array([0, 1]), np.array([0, 1]), 2, class_names={0: 'ground', 1: 'vehicle'})
        with tempfile.TemporaryDirectory() as tmp:
            directory = write_probe_report(report, Path(tmp) / 'probe')
            self.assertIn('mIoU: 1.0000', (directory / 'report.txt').read_text())
            self.assertEqual(orjson.loads((directory / 'report.json').read_bytes())['miou'], 1.0)
            lines = (directory / 'confusion.csv').read_text().splitlines()
            self.assertEqual(lines, ['ground,vehicle', '1,0', '0,1'])


class LinearProbeTests(SimpleTestCase):

    def test_separable_classes(self):
        rng = np.random.default_rng(0)
        features = np.vstack([rng.normal(-2.0, 0.3, size=(40, 3)), rng.normal(2.0, 0.3, size=(40, 3))])
        labels = np.repeat([0, 1], 40)
        probe = LinearProbe(3).fit(features, labels)
        np.testing.assert_array_equal(probe.predict(features), labels)
        np.testing.assert_array_equal(probe.trainable, [True, True, False])

    def test_split_holds_out_whole_scenes(self):
        sequences = [[None, None] for _ in range(10)]
        split = split_probe_frames(sequences, budget=0.5, seed=1)
        train_scenes = {scene for scene, _ in split.train}
        eval_scenes = {scene for scene, _ in split.evaluation}
        self.assertEqual(len(eval_scenes), 3)
        self.assertFalse(train_scenes & eval_scenes)
        self.assertEqual(len(split.train), 7)
        self.assertEqual(split_probe_frames(sequences, budget=0.5, seed=1), split)

    def test_point_level_keeps_every_frame(self):
        split = split_probe_frames([[None, None] for _ in range(4)], budget=0.2, point_level=True)
        self.assertEqual(len(split.train), 6)
        self.assertEqual(split.point_fraction, 0.2)

    def test_too_few_scenes(self):
        with self.assertRaises(ConfigurationError) as ctx:
            split_probe_frames([[None, None]], budget=1.0)
        self.assertEqual(ctx.exception.code, 'TOO_FEW_SCENES')

    def test_bad_budget(self):
        with self.assertRaises(ConfigurationError):
            split_probe_frames([[None], [None]], budget=0.0)

    def test_probe_on_synthesized_scenes(self):
        sequences = two_source_corpus()
        model = initialize_model(sequences, SMALL_DIMS)
        report = linear_probe(model, sequences, budget=1.0, num_classes=5)
        self.assertEqual(report.num_classes, 5)
        self.assertTrue(0.0 <= report.miou <= 1.0)
        self.assertEqual(report.runtime_seconds, 0.0)
        self.assertEqual(report.details['eval_frames'], 2)

    def test_fitted_classifier_is_reused_on_corrupted_frames(self):
        sequences = two_source_corpus()
        model = initialize_model(sequences, SMALL_DIMS)
        fitted = fit_linear_probe(model, sequences, budget=1.0, num_classes=5)
        weights = fitted.probe.weights.copy()

        clean = evaluate_linear_probe(model, fitted, sequences)
        self.assertEqual(clean.miou, linear_probe(model, sequences, budget=1.0, num_classes=5).miou)
        shifted = evaluate_linear_probe(model, fitted, corrupt_sequences(sequences, 'intensity_shift', 3))
        np.testing.assert_array_equal(fitted.probe.weights, weights)
        self.assertEqual(shifted.details['train_points'], clean.details['train_points'])
        self.assertEqual(shifted.details['eval_points'], clean.details['eval_points'])


class EvaluationTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        spec = SceneSpecFactory(source_profile=SourceProfileFactory(beam_count=32))
        cls.sequence = synthesize_scene(spec)
        cls.cloud = cls.sequence[0][0]

    def test_cosine_map_peaks_at_query(self):
        model = initialize_model([self.sequence], SMALL_DIMS)
        similarity = cosine_map(model, self.cloud, 5)
        self.assertAlmostEqual(float(similarity[5]), 1.0, places=12)
        self.assertTrue(np.all(np.abs(similarity) <= 1.0))
        with self.assertRaises(ConfigurationError) as ctx:
            cosine_map(model, self.cloud, len(self.cloud))
        self.assertEqual(ctx.exception.code, 'BAD_QUERY_INDEX')

    def test_cosine_map_csv(self):
        similarity = np.linspace(-1.0, 1.0, len(self.cloud))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_cosine_map(Path(tmp) / 'cosine_map.csv', self.cloud, similarity)
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], 'x,y,z,similarity,gt_semantic,gt_instance')
        self.assertEqual(len(lines), len(self.cloud) + 1)

    def test_instance_similarity(self):
        same, cross = instance_similarity(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]),
                                          np.array([1, 1, 2, 0]))
        self.assertAlmostEqual(same, 1.0)
        self.assertAlmostEqual(cross, 0.0)

    def test_beam_drop_removes_half_the_rings(self):
        rings = len(np.unique(ring_ids(self.cloud.coords)))
        dropped = corrupt(self.cloud, 'beam_drop', 2, seed=1)
        remaining = len(np.unique(ring_ids(dropped.coords)))
        self.assertEqual(remaining, rings - int(round(0.5 * rings)))
        np.testing.assert_array_equal(np.isin(dropped.coords, self.cloud.coords).all(axis=1), True)

    def test_jitter_magnitude(self):
        jittered = corrupt(self.cloud, 'jitter', 2, seed=2)
        displacement = np.linalg.norm(jittered.coords - self.cloud.coords, axis=1)
        self.assertLess(displacement.mean(), 3 * 0.05)
        self.assertGreater(displacement.mean(), 0.05)
        np.testing.assert_array_equal(jittered.gt_semantic, self.cloud.gt_semantic)
        np.testing.assert_array_equal(jittered.gt_instance, self.cloud.gt_instance)

    def test_intensity_shift_scales_intensity_only(self):
        shifted = corrupt(self.cloud, 'intensity_shift', 3)
        np.testing.assert_allclose(shifted.features[:, 0], 2.0 * self.cloud.features[:, 0])
        np.testing.assert_array_equal(shifted.features[:, 1], self.cloud.features[:, 1])
        np.testing.assert_array_equal(shifted.coords, self.cloud.coords)
        mild = corrupt(self.cloud, 'intensity_shift', 1)
        np.testing.assert_allclose(mild.features[:, 0], 1.25 * self.cloud.features[:, 0])
        np.testing.assert_array_equal(mild.features[:, 1:], self.cloud.features[:, 1:])

    def test_corruption_is_seeded(self):
        first = corrupt(self.cloud, 'jitter', 1, seed=4)
        second = corrupt(self.cloud, 'jitter', 1, seed=4)
        np.testing.assert_array_equal(first.coords, second.coords)

    def test_unknown_corruption(self):
        with self.assertRaises(ConfigurationError):
            corrupt(self.cloud, 'fog', 1)
        with self.assertRaises(ConfigurationError):
            corrupt(self.cloud, 'jitter', 4)

    def test_corrupt_sequences_keeps_cameras(self):
        corrupted = corrupt_sequences([self.sequence], 'jitter', 1)
        self.assertEqual(len(corrupted[0]), len(self.sequence))
        self.assertIs(corrupted[0][0][1], self.sequence[0][1])
        self.assertEqual(corrupted[0].instance_classes, self.sequence.instance_classes)

    def test_robustness_summary(self):
        summary = robustness_summary(
            0.8,
            {('jitter', 1): 0.6, ('jitter', 2): 0.4},
            {('jitter', 1): 0.5, ('jitter', 2): 0.3},
        )
        self.assertAlmostEqual(summary['ce']['jitter'], 1.0 / 1.2)
        self.assertAlmostEqual(summary['mce'], 1.0 / 1.2)
        self.assertAlmostEqual(summary['mrr'], 0.625)
