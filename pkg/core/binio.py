"""
Little-endian binary helpers shared by every on-disk format.

Each format starts with an 8-byte magic whose first six characters name the
format and version (for example ``LADPC1``) followed by two NUL bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .exceptions import DatasetFormatError


MAGIC_SIZE = 8


def make_magic(tag, version=1):
    """Return the 8-byte magic for a 5-letter tag and a single-digit version."""
    return f'{tag}{version}'.encode('ascii').ljust(MAGIC_SIZE, b'\0')


class BinaryWriter:
    """Accumulates a little-endian payload."""

    def __init__(self, magic):
        self._chunks = [magic]

    def u32(self, *values):
        self._chunks.append(struct.pack(f'<{len(values)}I', *values))
        return self

    def u16(self, *values):
        self._chunks.append(struct.pack(f'<{len(values)}H', *values))
        return self

    def u8(self, *values):
        self._chunks.append(struct.pack(f'<{len(values)}B', *values))
        return self

    def raw(self, data):
        self._chunks.append(bytes(data))
        return self

    def array(self, values, dtype):
        self._chunks.append(np.ascontiguousarray(values, dtype=np.dtype(dtype).newbyteorder('<')).tobytes())
        return self

    def getvalue(self):
        return b''.join(self._chunks)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.getvalue())
        return path


class BinaryReader:
    """
    Reads a payload written by BinaryWriter.

    Raises DatasetFormatError with BAD_MAGIC, VERSION_MISMATCH or TRUNCATED.
    """

    def __init__(self, data, tag, version=1, source=None):
        self.data = bytes(data)
        self.offset = 0
        self.source = str(source) if source is not None else '<memory>'
        self._check_magic(tag, version)

    @classmethod
    def open(cls, path, tag, version=1):
        path = Path(path)
        if not path.exists():
            raise DatasetFormatError(
                f'{path} does not exist.',
                code=DatasetFormatError.MISSING_FRAME,
                details={'path': str(path)},
            )
        return cls(path.read_bytes(), tag, version=version, source=path)

    def _check_magic(self, tag, version):
        magic = self._take(MAGIC_SIZE)
        expected = make_magic(tag, version)
        if magic == expected:
            return

        prefix = tag.encode('ascii')
        if magic.startswith(prefix) and magic[len(prefix):len(prefix) + 1].isdigit():
            raise DatasetFormatError(
                f'{self.source}: unsupported {tag} version {magic[len(prefix):len(prefix) + 1].decode()}.',
                code=DatasetFormatError.VERSION_MISMATCH,
                details={'expected': expected.decode('ascii', 'replace'), 'found': magic.decode('ascii', 'replace')},
            )
        raise DatasetFormatError(
            f'{self.source}: bad magic.',
            code=DatasetFormatError.BAD_MAGIC,
            details={'expected': expected.decode('ascii', 'replace')},
        )

    def _take(self, size):
        end = self.offset + size
        if end > len(self.data):
            raise DatasetFormatError(
                f'{self.source}: truncated payload (needs {end} bytes, has {len(self.data)}).',
                code=DatasetFormatError.TRUNCATED,
                details={'needed': end, 'available': len(self.data)},
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, count=1):
        values = struct.unpack(f'<{count}I', self._take(4 * count))
        return values[0] if count == 1 else values

    def u8(self, count=1):
        values = struct.unpack(f'<{count}B', self._take(count))
        return values[0] if count == 1 else values

    def raw(self, size):
        return self._take(size)

    def array(self, dtype, count, shape=None):
        dtype = np.dtype(dtype).newbyteorder('<')
        values = np.frombuffer(self._take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder('='))
        return values.reshape(shape) if shape is not None else values

    def expect_end(self):
        if self.offset != len(self.data):
            raise DatasetFormatError(
                f'{self.source}: {len(self.data) - self.offset} trailing bytes.',
                code=DatasetFormatError.MALFORMED_HEADER,
            )
