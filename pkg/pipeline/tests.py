import tempfile
from pathlib import Path

import orjson
import pytest
from django.test import SimpleTestCase

from core.exceptions import EXIT_INVALID_CONFIG, EXIT_MISSING_INPUT, EXIT_OK, ConfigurationError, MissingInputError
from core.utils import read_json
from embed.checkpoints import load_checkpoint
from pipeline.config import RESOLVED_CONFIG_NAME, RunConfig
from pipeline.services import RunPaths, run_subcommand
from scenes.storage import read_dataset
from training.evaluation import instance_similarity


SMALL_RUN = {
    'synth': {'scenes_per_source': 1, 'azimuth_count': 90},
    'model': {'hidden_dim': 8, 'point_dim': 8, 'embedding_dim': 4, 'image_dim': 6, 'image_stride': 2},
    'train': {'steps': 2, 'batch_size': 2},
    'probe': {'budget': 1.0},
    'corrupt': {'kinds': ['jitter'], 'severities': [1]},
}


class RunConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = RunConfig.from_dict({})
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.synth.azimuth_count, 720)
        self.assertEqual(config.loss.temperature, 0.07)
        self.assertIsNone(config.misalign)

    def test_unknown_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig.from_dict({'sed': 1})
        self.assertEqual(ctx.exception.code, 'UNKNOWN_CONFIG_KEY')

    def test_unknown_nested_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig.from_dict({'train': {'stepz': 3}})
        self.assertEqual(ctx.exception.details['unknown'], ['train.stepz'])

    def test_run_level_keys_inside_train(self):
        for key in ('seed', 'loss', 'record_timing'):
            with self.assertRaises(ConfigurationError) as ctx:
                RunConfig.from_dict({'train': {key: 1}})
            self.assertEqual(ctx.exception.details['unknown'], [f'train.{key}'])

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({'threads': 0})
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig.from_dict({'misalign': [0.1]})
        self.assertEqual(ctx.exception.code, 'BAD_MISALIGNMENT')
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({'loss': {'weights': {'cdp': -1.0}}})
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({'train': 5})

    def test_resolved_round_trip(self):
        config = RunConfig.from_dict({
            'seed': 7,
            'misalign': [0.1, 0.2],
            'loss': {'temperature': 0.1, 'weights': {'cdp': 0.0}},
            'train': {'steps': 5},
            'superpixels': {'mode': 'noisy', 'split_prob': 0.5},
        })
        self.assertEqual(RunConfig.from_dict(config.resolved()), config)
        self.assertNotIn('seed', config.resolved()['train'])

    def test_run_level_values_reach_training(self):
        config = RunConfig.from_dict({'seed': 4, 'timing': True, 'baseline_slic': True})
        train = config.train_config
        self.assertEqual(train.seed, 4)
        self.assertTrue(train.record_timing)
        self.assertTrue(train.loss.baseline_slic)

    def test_load_with_overrides(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_bytes(orjson.dumps({'seed': 3, 'train': {'steps': 10}}))
            config = RunConfig.load(path, seed=9, out=tmp, threads=None)
            self.assertEqual(config.seed, 9)
            self.assertEqual(config.train.steps, 10)
            self.assertEqual(config.out_dir, Path(tmp))

            written = config.write_resolved(tmp)
            self.assertEqual(written.name, RESOLVED_CONFIG_NAME)
            self.assertEqual(read_json(written), config.resolved())

    def test_load_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MissingInputError):
                RunConfig.load(Path(tmp) / 'absent.json')
            path = Path(tmp) / 'broken.json'
            path.write_text('{"seed": ')
            with self.assertRaises(ConfigurationError) as ctx:
                RunConfig.load(path)
            self.assertEqual(ctx.exception.code, 'INVALID_JSON')


class SubcommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config_path = self.root / 'run.json'
        self.config_path.write_bytes(orjson.dumps(SMALL_RUN))

    def tearDown(self):
        self.tmp.cleanup()

    def run_stage(self, name, *extra):
        return run_subcommand(name, ['--config', str(self.config_path), '--out', str(self.root / 'run'), *extra])

    def test_unknown_subcommand(self):
        self.assertEqual(run_subcommand('train'), EXIT_INVALID_CONFIG)

    def test_probe_before_pretrain(self):
        self.assertEqual(self.run_stage('probe'), EXIT_MISSING_INPUT)

    def test_report_without_outputs(self):
        self.assertEqual(self.run_stage('report'), EXIT_MISSING_INPUT)

    def test_bad_config_file(self):
        self.config_path.write_bytes(orjson.dumps({'trian': {}}))
        self.assertEqual(self.run_stage('synth'), EXIT_INVALID_CONFIG)

    def test_data_stages(self):
        paths = RunPaths(self.root / 'run')
        self.assertEqual(self.run_stage('synth'), EXIT_OK)
        manifest = read_json(paths.dataset / 'manifest.json')
        self.assertEqual(len(manifest['sequences']), 2)
        self.assertTrue((paths.dataset / RESOLVED_CONFIG_NAME).exists())

        self.assertEqual(self.run_stage('superpixel'), EXIT_OK)
        scene_id = manifest['sequences'][0]['scene_id']
        self.assertTrue(paths.superpixel_file(scene_id, 1).exists())

        self.assertEqual(self.run_stage('pairs'), EXIT_OK)
        pairs = read_json(paths.pairs / 'pairs.json')
        self.assertEqual(len(pairs['frames']), 4)
        self.assertGreater(pairs['projection_agreement'], 0.9)

        self.assertEqual(self.run_stage('segment'), EXIT_OK)
        self.assertTrue(paths.segment_file(scene_id, 0).exists())

    def test_same_seed_same_dataset(self):
        dataset = RunPaths(self.root / 'run').dataset

        def snapshot():
            manifest = read_json(dataset / 'manifest.json')
            files = [frame['point_cloud'] for entry in manifest['sequences'] for frame in entry['frames']]
            return [(dataset / name).read_bytes() for name in ['manifest.json', *files]]

        self.assertEqual(self.run_stage('synth', '--seed', '11'), EXIT_OK)
        first = snapshot()
        self.assertEqual(self.run_stage('synth', '--seed', '11', '--threads', '2'), EXIT_OK)
        self.assertEqual(snapshot(), first)

    @pytest.mark.slow
    def test_full_run(self):
        paths = RunPaths(self.root / 'run')
        for stage in ('synth', 'superpixel', 'pairs', 'segment', 'pretrain', 'probe', 'corrupt', 'report'):
            self.assertEqual(self.run_stage(stage), EXIT_OK, stage)
        self.assertEqual(len(paths.metrics.read_bytes().splitlines()), 2)
        self.assertTrue((paths.probe / 'pretrained' / 'report.json').exists())
        self.assertTrue((paths.probe / 'random' / 'report.json').exists())
        self.assertTrue((paths.probe / 'cosine_map.csv').exists())
        robustness = read_json(paths.corrupt / 'robustness.json')
        self.assertEqual(len(robustness['cases']), 1)
        pretrained = read_json(paths.probe / 'pretrained' / 'report.json')
        self.assertEqual(robustness['clean_miou'], pretrained['miou'])
        summary = (paths.report / 'summary.csv').read_text().splitlines()
        self.assertEqual(summary[0], 'section,metric,value')
        self.assertIn('probe,miou_gain', '\n'.join(summary))


DESK_RUN = {
    'train': {'steps': 500},
    'probe': {'budget': 0.1},
}


@pytest.mark.slow
class PretrainingGainTests(SimpleTestCase):
    """Default corpus, 500 steps, 10% labeled frames."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config_path = self.root / 'run.json'
        self.config_path.write_bytes(orjson.dumps(DESK_RUN))

    def tearDown(self):
        self.tmp.cleanup()

    def pretrain_run(self, name, seed, *extra):
        paths = RunPaths(self.root / name)
        args = ['--config', str(self.config_path), '--out', str(paths.root), '--seed', str(seed)]
        for stage in ('synth', 'superpixel', 'segment'):
            self.assertEqual(run_subcommand(stage, args), EXIT_OK, stage)
        self.assertEqual(run_subcommand('pretrain', [*args, *extra]), EXIT_OK)
        self.assertEqual(run_subcommand('probe', args), EXIT_OK)
        return paths

    def gain(self, paths):
        pretrained = read_json(paths.probe / 'pretrained' / 'report.json')['miou']
        random_init = read_json(paths.probe / 'random' / 'report.json')['miou']
        return pretrained - random_init

    def test_pretrained_encoder_beats_random_init(self):
        gains = [self.gain(self.pretrain_run(f'seed_{seed}', seed)) for seed in (0, 1, 2)]
        for gain in gains:
            self.assertGreater(gain, 0.0)
        self.assertGreaterEqual(sum(gains) / len(gains), 0.10)

    def test_gain_survives_misaligned_calibration(self):
        for fraction in ('0.01', '0.05', '0.10'):
            paths = self.pretrain_run(f'misalign_{fraction}', 0, '--misalign', fraction, fraction)
            self.assertGreater(self.gain(paths), 0.0, fraction)

    def test_same_instance_points_end_up_closer(self):
        paths = self.pretrain_run('instances', 0)
        model, _ = load_checkpoint(paths.checkpoint)
        cloud = read_dataset(paths.dataset)[0][0][0]
        same, cross = instance_similarity(model.point_embeddings(cloud), cloud.gt_instance)
        self.assertGreater(same, cross)
