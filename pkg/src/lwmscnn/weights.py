"""The "LWMS" tensor container.

Layout, all integers little-endian::

    b"LWMS"  u16 version  u32 tensor_count
    per tensor: u16 name_len, utf-8 name, u8 rank, u32 extent * rank,
                u8 dtype tag (0 = f32, 1 = f64), raw element data
    u32 crc32 of every preceding byte

Writes go to a temporary file that is renamed into place, so a reader never
sees a partial file. Reads validate everything before returning anything.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IncompatibleWeightsError, WeightFormatError
from .io_utils import atomic_write_bytes

MAGIC = b"LWMS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large for the container")
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 14:
        raise WeightFormatError("file too short to be an LWMS container")
    if data[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFormatError("CRC mismatch: file is truncated or corrupt")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + nlen > len(body):
                raise WeightFormatError("tensor name runs past end of file")
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (tag,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if tag not in _DTYPES:
                raise WeightFormatError(f"{name}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise WeightFormatError(f"{name}: data runs past end of file")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            out[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"malformed tensor record: {exc}") from exc
    if pos != len(body):
        raise WeightFormatError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]):
    atomic_write_bytes(path, encode(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_weights(model, path):
    write_tensors(path, model.named_tensors())


def load_weights(model, path):
    """Fill ``model`` from ``path``. The model is untouched if anything mismatches."""
    tensors = read_tensors(path)
    expected = model.named_tensors()
    for name, arr in expected.items():
        if name not in tensors:
            raise IncompatibleWeightsError(f"tensor {name!r} missing from {path}")
        if tensors[name].shape != arr.shape:
            raise IncompatibleWeightsError(
                f"tensor {name!r}: file shape {tensors[name].shape} != model shape {arr.shape}")
    extra = [n for n in tensors if n not in expected]
    if extra:
        raise IncompatibleWeightsError(f"tensor {extra[0]!r} in file has no slot in the model")
    model.set_state(tensors)
    return model


def load_model(path, config, seed=42):
    from .model import build
    return load_weights(build(config, seed=seed, init=False), path)
