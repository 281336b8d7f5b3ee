"""
Segment sidecar (``LADSG1``): u32 N, u32 M_k, then N u32 labels.
"""

from pathlib import Path

import numpy as np

from core.binio import BinaryReader, BinaryWriter, make_magic
from core.exceptions import DatasetFormatError
from core.utils import run_validators
from core.validators import validate_label_array

from .datatypes import SegmentAssignment


SEGMENT_TAG = 'LADSG'


def encode_segment_labels(labels, segment_count):
    labels = np.asarray(labels, dtype=np.int64)
    return (
        BinaryWriter(make_magic(SEGMENT_TAG))
        .u32(len(labels), segment_count)
        .array(labels, '<u4')
        .getvalue()
    )


def decode_segment_labels(data, source=None):
    reader = BinaryReader(data, SEGMENT_TAG, source=source)
    n, segment_count = reader.u32(2)
    labels = reader.array('u4', n).astype(np.int64)
    reader.expect_end()
    run_validators(labels, [validate_label_array(segment_count, f'{reader.source} segment labels')], DatasetFormatError)
    return SegmentAssignment(labels=labels, segment_count=segment_count)


def write_segment_assignment(assignment, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_segment_labels(assignment.labels, assignment.segment_count))
    return path


def read_segment_assignment(path):
    reader = BinaryReader.open(path, SEGMENT_TAG)
    return decode_segment_labels(reader.data, source=path)
