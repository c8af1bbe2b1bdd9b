"""Named-tensor archive: the on-disk format for encoders, networks and checkpoints.

Layout (all integers little-endian)::

    offset  size        field
    0       4           magic  b"NTA1"
    4       4   uint32  format version (currently 1)
    8       8   uint64  M = length of the metadata record
    16      M           metadata, UTF-8 JSON object (keys sorted)
    16+M    4   uint32  N = number of tensors
    then N entries, in insertion order:
            2   uint16  L = length of the tensor name
            L           name, UTF-8 (dotted hierarchy, e.g. "encoder.0.conv1.weight")
            1   uint8   D = number of dimensions (0 for scalars)
            8*D uint64  shape, outermost first
            8   uint64  B = byte length of the payload, must equal 4 * prod(shape)
            B           payload, float32 little-endian, C order
    last 4 bytes:
            4   uint32  CRC-32 (zlib) of every preceding byte

Only float32 payloads are stored; integers and configuration live in the metadata.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch
from torch import nn

MAGIC = b"NTA1"
VERSION = 1
_F32 = np.dtype("<f4")


class ArchiveError(Exception):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


class MissingTensorError(ArchiveError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing tensor"


class UnexpectedTensorError(ArchiveError):
    pass


class ShapeMismatchError(ArchiveError):
    pass


def _as_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.dtype != torch.float32:
            raise TypeError(f"only float32 tensors can be archived (got {t.dtype})")
        t = t.numpy()
    arr = np.asarray(t)
    if arr.dtype != np.float32:
        raise TypeError(f"only float32 tensors can be archived (got {arr.dtype})")
    # ascontiguousarray would promote 0-d scalars to 1-d
    return np.asarray(arr, dtype=_F32, order="C")


def encode(tensors: Mapping[str, object], meta: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = _as_f32(t)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes(order="C")
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(buf) < 24 or buf[:4] != MAGIC:
        raise CorruptArchiveError("not a named-tensor archive (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptArchiveError("checksum mismatch; archive is truncated or corrupted")
    version, meta_len = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise ArchiveVersionError(f"archive format version {version}, this reader supports {VERSION}")
    pos = 16
    try:
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nl].decode("utf-8")
            pos += nl
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or pos + nbytes > len(body):
                raise CorruptArchiveError(f"bad payload length for tensor {name!r}")
            tensors[name] = np.frombuffer(body, dtype=_F32, count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptArchiveError(f"malformed archive: {e}") from e
    if pos != len(body):
        raise CorruptArchiveError("trailing bytes after last tensor")
    return tensors, meta


def write_archive(path, tensors: Mapping[str, object], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def read_archive(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read archive {path}: {e}") from e
    return decode(buf)


def module_tensors(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((prefix + k, v) for k, v in module.state_dict().items())


def load_module_tensors(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "",
                        strict: bool = True) -> None:
    """Copy archived tensors named ``prefix + <state_dict key>`` into `module`.

    Raises MissingTensorError / ShapeMismatchError naming the offending tensor.
    """
    state = module.state_dict()
    new_state: Dict[str, torch.Tensor] = {}
    for key, current in state.items():
        name = prefix + key
        if name not in tensors:
            raise MissingTensorError(f"archive is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise ShapeMismatchError(
                f"tensor {name!r}: expected shape {tuple(current.shape)}, found {tuple(arr.shape)}"
            )
        new_state[key] = torch.from_numpy(np.array(arr, dtype=np.float32))
    if strict:
        extra = [n for n in tensors if n.startswith(prefix) and n[len(prefix):] not in state]
        if extra:
            raise UnexpectedTensorError(f"archive has unexpected tensor(s) {extra[:5]}")
    module.load_state_dict(new_state)
