import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.binio import BinaryReader, BinaryWriter, make_magic
from core.exceptions import (
    EXIT_INVALID_CONFIG,
    EXIT_MISSING_INPUT,
    EXIT_NUMERICAL_FAILURE,
    ConfigurationError,
    DatasetFormatError,
    DivergenceError,
    GeometryError,
    LossError,
    MissingInputError,
)
from core.utils import (
    STREAM_SYNTH,
    STREAM_TRAIN,
    ordered_map,
    read_json,
    require_paths,
    rng_stream,
    run_validators,
    stage_record,
    write_json,
)
from core.validators import (
    validate_choice,
    validate_fraction,
    validate_intrinsics,
    validate_label_array,
    validate_range,
    validate_rigid_transform,
    validate_shape,
)


class RandomStreamTests(SimpleTestCase):

    def test_same_seed_and_stream_repeat(self):
        first = rng_stream(7, STREAM_SYNTH, 3).random(5)
        second = rng_stream(7, STREAM_SYNTH, 3).random(5)
        np.testing.assert_array_equal(first, second)

    def test_streams_are_independent(self):
        synth = rng_stream(7, STREAM_SYNTH).random(5)
        train = rng_stream(7, STREAM_TRAIN).random(5)
        self.assertFalse(np.allclose(synth, train))

    def test_seed_changes_stream(self):
        self.assertFalse(np.allclose(rng_stream(1, STREAM_SYNTH).random(5), rng_stream(2, STREAM_SYNTH).random(5)))


class ValidatorTests(SimpleTestCase):

    def test_range_error_becomes_configuration_error(self):
        with self.assertRaises(ConfigurationError) as ctx:
            run_validators(2.0, [validate_range(0, 1, name='dropout_rate')])
        self.assertEqual(ctx.exception.code, 'OUT_OF_RANGE')
        self.assertIn('dropout_rate', ctx.exception.message)
        self.assertEqual(ctx.exception.exit_code, EXIT_INVALID_CONFIG)

    def test_exclusive_maximum(self):
        run_validators(0.99, [validate_range(0, 1, inclusive_max=False)])
        with self.assertRaises(ConfigurationError):
            run_validators(1.0, [validate_range(0, 1, inclusive_max=False)])

    def test_exception_class_is_respected(self):
        with self.assertRaises(GeometryError):
            run_validators(np.eye(4) * 2.0, [validate_rigid_transform()], GeometryError)

    def test_rigid_transform_accepts_rotation(self):
        pose = np.eye(4)
        pose[:3, :3] = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        pose[:3, 3] = [1.0, 2.0, 3.0]
        run_validators(pose, [validate_rigid_transform(1e-9)])

    def test_reflection_is_not_rigid(self):
        pose = np.diag([1.0, 1.0, -1.0, 1.0])
        with self.assertRaises(ConfigurationError) as ctx:
            run_validators(pose, [validate_rigid_transform()])
        self.assertEqual(ctx.exception.code, 'NOT_RIGID')

    def test_intrinsics(self):
        run_validators(np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]]), [validate_intrinsics])
        with self.assertRaises(ConfigurationError):
            run_validators(np.zeros((3, 3)), [validate_intrinsics])

    def test_fraction_and_choice(self):
        run_validators(1.0, [validate_fraction()])
        with self.assertRaises(ConfigurationError):
            run_validators(0.0, [validate_fraction()])
        with self.assertRaises(ConfigurationError) as ctx:
            run_validators('median', [validate_choice(('mean', 'max'), name='mode')])
        self.assertEqual(ctx.exception.code, 'INVALID_CHOICE')

    def test_shape(self):
        run_validators(np.zeros((4, 3)), [validate_shape(None, 3)])
        with self.assertRaises(ConfigurationError) as ctx:
            run_validators(np.zeros((4, 2)), [validate_shape(None, 3, name='coords')])
        self.assertEqual(ctx.exception.code, 'BAD_SHAPE')

    def test_label_overflow(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            run_validators(np.array([0, 1, 5]), [validate_label_array(3)], DatasetFormatError)
        self.assertEqual(ctx.exception.code, DatasetFormatError.LABEL_OVERFLOW)


class ExceptionTests(SimpleTestCase):

    def test_exit_codes(self):
        self.assertEqual(ConfigurationError().exit_code, EXIT_INVALID_CONFIG)
        self.assertEqual(MissingInputError().exit_code, EXIT_MISSING_INPUT)
        self.assertEqual(DatasetFormatError().exit_code, EXIT_MISSING_INPUT)
        self.assertEqual(LossError().exit_code, EXIT_NUMERICAL_FAILURE)
        self.assertEqual(DivergenceError().exit_code, EXIT_NUMERICAL_FAILURE)

    def test_divergence_keeps_step_and_state(self):
        error = DivergenceError('boom', last_good={'w': 1}, step=12)
        self.assertEqual(error.step, 12)
        self.assertEqual(error.last_good, {'w': 1})
        self.assertEqual(error.as_record()['error']['details']['step'], 12)


class FileHelperTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_json_is_sorted_and_stable(self):
        path = write_json(self.root / 'a' / 'doc.json', {'b': 1, 'a': np.float64(0.5)})
        first = path.read_bytes()
        write_json(path, {'a': 0.5, 'b': 1})
        self.assertEqual(first, path.read_bytes())
        self.assertLess(first.index(b'"a"'), first.index(b'"b"'))
        self.assertEqual(read_json(path), {'a': 0.5, 'b': 1})

    def test_read_missing_json(self):
        with self.assertRaises(MissingInputError):
            read_json(self.root / 'missing.json')

    def test_require_paths(self):
        (self.root / 'here').touch()
        self.assertEqual(require_paths(self.root / 'here'), [self.root / 'here'])
        with self.assertRaises(MissingInputError) as ctx:
            require_paths(self.root / 'here', self.root / 'gone')
        self.assertEqual(ctx.exception.details['missing'], [str(self.root / 'gone')])

    def test_stage_record(self):
        record = stage_record('synth', scenes=3)
        self.assertEqual(record, {'stage': 'synth', 'success': True, 'scenes': 3})


class OrderedMapTests(SimpleTestCase):

    def test_order_is_kept_on_threads(self):
        self.assertEqual(ordered_map(lambda x: x * x, range(20), threads=4), [x * x for x in range(20)])


class BinaryFormatTests(SimpleTestCase):

    def payload(self):
        return BinaryWriter(make_magic('LADXX')).u32(2, 3).array([1.5, -2.0], '<f4').getvalue()

    def test_read_back(self):
        reader = BinaryReader(self.payload(), 'LADXX')
        self.assertEqual(reader.u32(2), (2, 3))
        np.testing.assert_array_equal(reader.array('f4', 2), [1.5, -2.0])
        reader.expect_end()

    def test_bad_magic(self):
        data = b'GARBAGE!' + self.payload()[8:]
        with self.assertRaises(DatasetFormatError) as ctx:
            BinaryReader(data, 'LADXX')
        self.assertEqual(ctx.exception.code, DatasetFormatError.BAD_MAGIC)

    def test_version_mismatch(self):
        data = make_magic('LADXX', 2) + self.payload()[8:]
        with self.assertRaises(DatasetFormatError) as ctx:
            BinaryReader(data, 'LADXX')
        self.assertEqual(ctx.exception.code, DatasetFormatError.VERSION_MISMATCH)

    def test_truncated(self):
        reader = BinaryReader(self.payload()[:-3], 'LADXX')
        reader.u32(2)
        with self.assertRaises(DatasetFormatError) as ctx:
            reader.array('f4', 2)
        self.assertEqual(ctx.exception.code, DatasetFormatError.TRUNCATED)

    def test_trailing_bytes(self):
        reader = BinaryReader(self.payload() + b'\0', 'LADXX')
        reader.u32(2)
        reader.array('f4', 2)
        with self.assertRaises(DatasetFormatError) as ctx:
            reader.expect_end()
        self.assertEqual(ctx.exception.code, DatasetFormatError.MALFORMED_HEADER)
