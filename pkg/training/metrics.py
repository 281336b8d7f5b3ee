"""
Per-step metrics log (newline-delimited JSON).
"""

import logging
from pathlib import Path

import numpy as np
import orjson

from core.exceptions import DatasetFormatError, MissingInputError


logger = logging.getLogger(__name__)

METRIC_FIELDS = ('step', 'l_vfm', 'l_tmp', 'l_p2s', 'l_cdp', 'total', 'grad_norm', 'wall_ms')


def step_record(step, loss, grad_norm, wall_ms=0.0):
    """
    One metrics record.

    In baseline mode the spatial term is the SLIC one and is still logged
    under ``l_vfm``.
    """
    spatial = 'slic' if 'slic' in loss.terms else 'vfm'
    return {
        'step': int(step),
        'l_vfm': float(loss.component(spatial)),
        'l_tmp': float(loss.component('tmp')),
        'l_p2s': float(loss.component('p2s')),
        'l_cdp': float(loss.component('cdp')),
        'total': float(loss.value),
        'grad_norm': float(grad_norm),
        'wall_ms': float(wall_ms),
    }


class MetricsLog:
    """Append-only NDJSON writer; one record per optimization step."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        self._handle = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open('wb')

    def write(self, record):
        self.records.append(record)
        if self._handle:
            self._handle.write(orjson.dumps(record) + b'\n')

    def close(self):
        if self._handle:
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def read_metrics(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f'{path} does not exist.', details={'path': str(path)})
    records = []
    for number, line in enumerate(path.read_bytes().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(orjson.loads(line))
        except orjson.JSONDecodeError as exc:
            raise DatasetFormatError(
                f'{path}:{number}: invalid metrics record.',
                code=DatasetFormatError.MALFORMED_HEADER,
            ) from exc
    return records


def moving_average(values, window):
    """Trailing mean over ``window`` values (shorter at the start)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    ends = np.arange(1, len(values) + 1)
    starts = np.maximum(ends - window, 0)
    return (cumulative[ends] - cumulative[starts]) / (ends - starts)


def summarize_metrics(records, window=20):
    """First/last moving averages of the total loss for a run."""
    if not records:
        return {'steps': 0}
    averages = moving_average([record['total'] for record in records], window)
    return {
        'steps': len(records),
        'first_total': float(averages[min(window, len(averages)) - 1]),
        'last_total': float(averages[-1]),
        'final_grad_norm': float(records[-1]['grad_norm']),
    }
