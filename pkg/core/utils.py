import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import orjson
from django.conf import settings
from django.core.exceptions import ValidationError

from .exceptions import ConfigurationError, MissingInputError, from_validation_error


logger = logging.getLogger(__name__)


# Random stream ids; every module draws from its own stream of the run seed.
STREAM_SYNTH = 1
STREAM_SUPERPIXELS = 2
STREAM_GEOSEG = 3
STREAM_EMBED = 4
STREAM_TRAIN = 5
STREAM_PROBE = 6
STREAM_CORRUPT = 7
STREAM_MISALIGN = 8
STREAM_GRADCHECK = 9


def rng_stream(seed, *stream):
    """
    Create a generator for one stream of a seed.

    Args:
        seed: Run seed
        *stream: Stream ids (module id, then any sub-ids such as frame index)

    Returns:
        numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def run_validators(value, validators, exception_class=ConfigurationError):
    """
    Run validators on a value and raise a pipeline exception on failure.

    Args:
        value: Value to validate
        validators: Iterable of validator callables
        exception_class: PipelineException subclass to raise
    """
    for validator in validators:
        try:
            validator(value)
        except ValidationError as exc:
            raise from_validation_error(exc, exception_class) from exc


def ordered_map(function, items, threads=None):
    """
    Map a function over items, optionally on a thread pool.

    Output order always matches input order.
    """
    threads = threads or getattr(settings, 'LAD_THREADS', 1)
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [function(item) for item in items]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, items))


def write_json(path, data):
    """Write a JSON document with sorted keys so output is byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(
        data,
        option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY,
    ))
    return path


def read_json(path):
    """Read a JSON document, raising MissingInputError if absent."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f'{path} does not exist.', details={'path': str(path)})
    return orjson.loads(path.read_bytes())


def require_paths(*paths):
    """
    Validate that stage inputs exist.

    Returns:
        List of Path objects
    """
    resolved = [Path(path) for path in paths]
    missing = [str(path) for path in resolved if not path.exists()]
    if missing:
        raise MissingInputError(
            f'Missing input: {missing[0]}',
            details={'missing': missing},
        )
    return resolved


def stage_record(stage, **data):
    """
    Create a standardized stage completion record.

    Args:
        stage: Stage name
        **data: Counts and paths produced by the stage

    Returns:
        dict
    """
    record = {'stage': stage, 'success': True}
    record.update(data)
    logger.info('%s finished: %s', stage, {k: v for k, v in data.items() if not isinstance(v, (list, dict))})
    return record
