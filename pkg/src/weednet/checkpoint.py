"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"WDNT"
    4       4     uint32 format version (currently 1)
    8       1     uint8 scalar width in bytes: 4 (float32) or 8 (float64)
    9       1     uint8 flags: bit 0 set when Adam moments follow the parameters
    10      4     uint32 length L of the JSON header
    14      L     UTF-8 JSON: {"architecture": {...}, "optimizer": {...} | null}
    14+L    8     uint64 optimizer step counter t
    22+L    8     uint64 parameter scalar count P
    30+L    P*w   parameters, little-endian floats
                  (nodes in topological order, kernel before bias,
                   each array flattened row-major)
    ...     P*w   Adam first moments, same order     (only if flag bit 0)
    ...     P*w   Adam second moments, same order    (only if flag bit 0)

Nothing may follow the last section.
"""
import json
import os
import struct
import tempfile
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import CorruptionError, FormatError
from .model import ArchitectureConfig, build
from .optim import AdamHyper, AdamState

MAGIC = b"WDNT"
VERSION = 1
_HEAD = struct.Struct("<4sIBBI")
_COUNTS = struct.Struct("<QQ")
_FLAG_ADAM = 1


class LoadedCheckpoint(NamedTuple):
    graph: object
    adam_state: Optional[AdamState]
    adam_hyper: Optional[AdamHyper]
    step: int


def _flat(arrays, dtype):
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype=dtype).ravel() for a in arrays]).astype(dtype.newbyteorder("<")).tobytes()


def save_checkpoint(graph, path, adam_state=None, adam_hyper=None):
    if graph.config is None:
        raise ValueError("only graphs created by weednet.model.build carry a config and can be saved")
    dtype = np.dtype(graph.dtype)
    params = [p for _, _, p in graph.parameters()]
    count = sum(p.size for p in params)
    header = json.dumps(
        {
            "architecture": graph.config.to_dict(),
            "optimizer": None if adam_hyper is None else adam_hyper.__dict__,
        },
        sort_keys=True,
    ).encode("utf-8")
    flags = _FLAG_ADAM if adam_state is not None else 0
    step = adam_state.t if adam_state is not None else 0
    chunks = [
        _HEAD.pack(MAGIC, VERSION, dtype.itemsize, flags, len(header)),
        header,
        _COUNTS.pack(step, count),
        _flat(params, dtype),
    ]
    if adam_state is not None:
        chunks += [_flat(adam_state.m, dtype), _flat(adam_state.v, dtype)]

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".wdnt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    """Parse a checkpoint file; returns graph, optimizer state/hyperparameters and step."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise CorruptionError(f"{path}: file too short for a checkpoint header")
    magic, version, width, flags, header_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if width not in (4, 8):
        raise FormatError(f"{path}: unsupported scalar width {width}")
    offset = _HEAD.size
    if len(blob) < offset + header_len + _COUNTS.size:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        config = ArchitectureConfig.from_dict(header["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable config block ({exc})") from None
    offset += header_len
    step, count = _COUNTS.unpack_from(blob, offset)
    offset += _COUNTS.size

    dtype = np.dtype(np.float32 if width == 4 else np.float64)
    graph = build(config, dtype=dtype.type, init="zeros")
    params = [p for _, _, p in graph.parameters()]
    expected = sum(p.size for p in params)
    if count != expected:
        raise CorruptionError(f"{path}: payload holds {count} parameters, architecture needs {expected}")
    sections = 3 if flags & _FLAG_ADAM else 1
    if len(blob) - offset != sections * count * width:
        raise CorruptionError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {sections * count * width}"
        )
    flat = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), offset=offset).astype(dtype)

    def unpack(section):
        out, pos = [], section * count
        for p in params:
            out.append(flat[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        return out

    for node_param, values in zip(graph.parameters(), unpack(0)):
        node_name, key, _ = node_param
        graph[node_name].params[key] = values
    adam_state = None
    if flags & _FLAG_ADAM:
        adam_state = AdamState(unpack(1), unpack(2), int(step))
    hyper = AdamHyper(**header["optimizer"]) if header.get("optimizer") else None
    return LoadedCheckpoint(graph, adam_state, hyper, int(step))


def load_checkpoint(path):
    return read_checkpoint(path).graph
