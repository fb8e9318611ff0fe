"""Bit-exact checkpoint container.

Layout (all integers little-endian):

    magic   9 bytes  b"PCNPROBE1"
    count   u64      number of records
    record  name_len u32, name UTF-8 bytes,
            dtype    u8 (0=float32, 1=float64, 2=int64),
            rank     u8,
            extents  rank x u64,
            data     raw little-endian array bytes

Records are written in sorted name order so equal contents give equal
bytes. Model parameters use their plain names; BN running statistics are
stored under the reserved "stats." prefix and optimizer state under
"opt." ("opt.m."/"opt.v." moments, "opt.buf." momentum, "opt.step").
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .model import PcnModel
from .optim import OptimizerState

MAGIC = b"PCNPROBE1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointFormatError(ValueError):
    pass


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _CODE_FOR:
                raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for '{name}'")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"unknown dtype code {code} for '{name}'")
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        dt = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
        out[name] = arr
    return out


def save_model(path, model: PcnModel, opt: OptimizerState | None = None) -> None:
    tensors = dict(model.params)
    tensors["meta.kind"] = np.frombuffer(model.kind.encode("utf-8").ljust(8, b"\0"), dtype=np.int64)
    for name, arr in model.stats.items():
        tensors[f"stats.{name}"] = arr
    if opt is not None:
        tensors["opt.step"] = np.array([opt.step], dtype=np.int64)
        for name, buf in opt.buffers.items():
            if isinstance(buf, tuple):
                tensors[f"opt.m.{name}"] = buf[0]
                tensors[f"opt.v.{name}"] = buf[1]
            else:
                tensors[f"opt.buf.{name}"] = buf
    write_tensors(path, tensors)


def load_model(path) -> PcnModel:
    tensors = read_tensors(path)
    kind = tensors.pop("meta.kind").tobytes().rstrip(b"\0").decode("utf-8")
    params, stats = {}, {}
    for name, arr in tensors.items():
        if name.startswith("stats."):
            stats[name[len("stats."):]] = arr
        elif not name.startswith("opt."):
            params[name] = arr
    return PcnModel(kind=kind, params=params, stats=stats)


def digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
