"""
container.py — Sectioned binary container for quantized models.

Layout
──────
  magic            8 bytes   (b'LUTQ\\x00\\x01\\x00\\x00' or b'LUTL\\x00\\x01\\x00\\x00')
  header_len       uint32 LE
  header           UTF-8 JSON: {"meta": {...}, "sections": [{name, dtype, shape, offset, length}]},
                   space-padded so the payload starts on an 8-byte boundary
  payload          raw section bytes, offsets relative to the payload start; each
                   section starts on an 8-byte boundary, gaps are zero bytes

Writes go to a .tmp sibling first; os.replace() then swaps it in so a reader
never sees a half-written container.
"""

from __future__ import annotations

import json
import math
import os
import pathlib
import struct

import numpy as np

from .errors import ModelFormatError

MAGIC_LUT = b'LUTQ\x00\x01\x00\x00'
MAGIC_LOG = b'LUTL\x00\x01\x00\x00'

_ALLOWED_DTYPES = ('<i4', '<u2', '<i8', '<u1', '<f4', '<f8', '<i2')
SECTION_ALIGN = 8


def _padding(n: int) -> int:
    return -n % SECTION_ALIGN


def write_container(path, magic: bytes, meta: dict,
                    sections: dict[str, np.ndarray]) -> pathlib.Path:
    """Serialise *sections* (name → array) plus *meta* to *path* atomically."""
    path = pathlib.Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder('<').str if arr.dtype.itemsize > 1 else arr.dtype.str
        if dtype == '|u1':
            dtype = '<u1'
        assert dtype in _ALLOWED_DTYPES, f'unsupported section dtype {dtype}'
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        offset += _padding(offset)
        entries.append({'name': name, 'dtype': dtype, 'shape': list(arr.shape),
                        'offset': offset, 'length': len(data)})
        blobs.append((offset, data))
        offset += len(data)
    header = json.dumps({'meta': meta, 'sections': entries}).encode('utf-8')
    header += b' ' * _padding(len(magic) + 4 + len(header))

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(magic)
        fh.write(struct.pack('<I', len(header)))
        fh.write(header)
        written = 0
        for start, data in blobs:
            fh.write(b'\x00' * (start - written))
            fh.write(data)
            written = start + len(data)
    os.replace(tmp, path)
    return path


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of write_container; ModelFormatError names the byte at fault."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ModelFormatError('no such container', path=str(path))
    raw = path.read_bytes()
    if raw[:len(magic)] != magic:
        raise ModelFormatError(f'bad magic {raw[:len(magic)]!r}, expected {magic!r}',
                               path=str(path), offset=0)
    pos = len(magic)
    if len(raw) < pos + 4:
        raise ModelFormatError('truncated before header length', path=str(path), offset=pos)
    (hlen,) = struct.unpack_from('<I', raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise ModelFormatError(f'truncated header ({hlen} bytes declared)',
                               path=str(path), offset=len(raw))
    try:
        header = json.loads(raw[pos:pos + hlen].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f'header is not valid JSON ({exc})',
                               path=str(path), offset=pos) from None
    base = pos + hlen
    sections: dict[str, np.ndarray] = {}
    for entry in header.get('sections', []):
        start = base + int(entry['offset'])
        length = int(entry['length'])
        dtype = np.dtype(entry['dtype'])
        shape = tuple(int(d) for d in entry['shape'])
        if start + length > len(raw):
            raise ModelFormatError(f'section {entry["name"]!r} runs past end of file',
                                   path=str(path), offset=len(raw))
        if length != math.prod(shape) * dtype.itemsize:
            raise ModelFormatError(f'section {entry["name"]!r}: length {length} does not '
                                   f'match shape {list(shape)}', path=str(path), offset=start)
        arr = np.frombuffer(raw, dtype=dtype, count=math.prod(shape), offset=start)
        sections[entry['name']] = arr.reshape(shape).copy()
    return header.get('meta', {}), sections
