"""
Encoder checkpoint (``LADCK1``).

Layout: magic, u32 format version, u32 header length, the header as JSON,
then every trainable parameter as f32 in header order. The header carries
model dims, parameter shapes, the image encoder seed and the per-source
normalization statistics. Loaded parameters are the f32-rounded values.
"""

import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import orjson

from core.binio import BinaryReader, BinaryWriter, make_magic
from core.exceptions import DatasetFormatError

from .normalization import SourceStats
from .services import ModelDims, PointModel


logger = logging.getLogger(__name__)

CHECKPOINT_TAG = 'LADCK'
CHECKPOINT_VERSION = 2


def encode_checkpoint(model, extra=None):
    parameters = model.parameters()
    header = {
        'dims': asdict(model.dims),
        'seed': model.seed,
        'parameters': [[name, list(value.shape)] for name, value in parameters.items()],
        'source_stats': model.stats.to_dict(),
        'extra': extra or {},
    }
    header_bytes = orjson.dumps(header, option=orjson.OPT_SORT_KEYS)
    writer = BinaryWriter(make_magic(CHECKPOINT_TAG)).u32(CHECKPOINT_VERSION, len(header_bytes)).raw(header_bytes)
    for _, value in parameters.items():
        writer.array(value, '<f4')
    return writer.getvalue()


def decode_checkpoint(data, source=None):
    """
    Returns:
        Tuple of (PointModel, extra header dict)
    """
    reader = BinaryReader(data, CHECKPOINT_TAG, source=source)
    version, header_length = reader.u32(2)
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(
            f'{reader.source}: unsupported checkpoint version {version}.',
            code=DatasetFormatError.VERSION_MISMATCH,
        )
    try:
        header = orjson.loads(reader.raw(header_length))
        dims = ModelDims(**header['dims'])
        layout = header['parameters']
        stats = SourceStats.from_dict(header['source_stats'])
    except (orjson.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(
            f'{reader.source}: malformed checkpoint header.',
            code=DatasetFormatError.MALFORMED_HEADER,
        ) from exc

    model = PointModel.initialize(seed=header.get('seed', 0), dims=dims, stats=stats)
    values = {}
    for name, shape in layout:
        count = int(np.prod(shape)) if shape else 1
        values[name] = reader.array('f4', count, tuple(shape)).astype(np.float64)
    reader.expect_end()
    model.load_parameters(values)
    return model, header.get('extra', {})


def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, extra))
    logger.info('Saved checkpoint %s', path)
    return path


def load_checkpoint(path):
    reader = BinaryReader.open(path, CHECKPOINT_TAG)
    return decode_checkpoint(reader.data, source=path)
