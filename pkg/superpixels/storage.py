"""
Superpixel map file (``LADSP1``): u32 H, u32 W, u32 segment_count, u8 kind,
then H*W u16 labels row-major.
"""

import logging
from pathlib import Path

import numpy as np

from core.binio import BinaryReader, BinaryWriter, make_magic
from core.exceptions import DatasetFormatError
from core.utils import run_validators
from core.validators import validate_label_array

from .datatypes import KIND_CODES, KIND_NAMES, SuperpixelMap
from .services import densify_labels


logger = logging.getLogger(__name__)

SUPERPIXEL_TAG = 'LADSP'
MAX_LABEL = np.iinfo(np.uint16).max


def encode_superpixel_map(superpixel_map):
    if superpixel_map.segment_count > MAX_LABEL:
        raise DatasetFormatError(
            f'{superpixel_map.segment_count} segments do not fit in u16 labels.',
            code=DatasetFormatError.LABEL_OVERFLOW,
        )
    height, width = superpixel_map.shape
    return (
        BinaryWriter(make_magic(SUPERPIXEL_TAG))
        .u32(height, width, superpixel_map.segment_count)
        .u8(KIND_CODES[superpixel_map.kind])
        .array(superpixel_map.labels, '<u2')
        .getvalue()
    )


def decode_superpixel_map(data, source=None):
    """
    Parse a superpixel file.

    Sparse label ids are densified to 1..M and the original -> dense table is
    kept on ``remap``.
    """
    reader = BinaryReader(data, SUPERPIXEL_TAG, source=source)
    height, width, segment_count = reader.u32(3)
    kind_code = reader.u8()
    if kind_code not in KIND_NAMES:
        raise DatasetFormatError(
            f'{reader.source}: unknown superpixel kind {kind_code}.',
            code=DatasetFormatError.MALFORMED_HEADER,
        )
    labels = reader.array('u2', height * width, (height, width)).astype(np.int64)
    reader.expect_end()

    run_validators(labels, [validate_label_array(segment_count, f'{reader.source} labels')], DatasetFormatError)

    dense, count, remap = densify_labels(labels)
    if count != segment_count:
        logger.info('%s: densified %d declared segments to %d', reader.source, segment_count, count)
    return SuperpixelMap(labels=dense, segment_count=count, kind=KIND_NAMES[kind_code], remap=remap)


def write_superpixel_map(superpixel_map, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_superpixel_map(superpixel_map))
    return path


def load_superpixel_map(path):
    reader = BinaryReader.open(path, SUPERPIXEL_TAG)
    return decode_superpixel_map(reader.data, source=path)
