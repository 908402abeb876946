"""Single-file, self-describing checkpoint format.

Layout (all integers little-endian)::

    b"M2MD"                      magic
    u32  version                 (currently 1)
    u64  descriptor length, then UTF-8 JSON architecture descriptor
    u64  tensor count
    per tensor:
        u32  name length, then UTF-8 name
        u8   dtype code          (0 = f32, 1 = f64)
        u32  rank
        i64  extent * rank
        raw little-endian payload, row-major
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .engine import Tensor
from .ir import BASIC, ArchGraph, BlockSpec, HeadSpec, StemSpec

MAGIC = b"M2MD"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def to_bytes(graph: ArchGraph, extra: dict | None = None) -> bytes:
    desc = graph.descriptor()
    if extra:
        desc["extra"] = extra
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    state = graph.state()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob, struct.pack("<Q", len(state))]
    for name, t in state.items():
        arr = np.ascontiguousarray(t.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes(order="C"))
    return b"".join(parts)


def save(graph: ArchGraph, path, extra: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the file content."""
    data = to_bytes(graph, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> ArchGraph:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an M2MD checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (dlen,) = r.unpack("<Q")
    desc = json.loads(r.take(dlen).decode("utf-8"))
    (count,) = r.unpack("<Q")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}q") if rank else ()
        dt = CODE_DTYPES[code]
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after tensor directory")
    return graph_from_descriptor(desc, tensors)


def load(path) -> ArchGraph:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def read_extra(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    r.take(8)
    (dlen,) = r.unpack("<Q")
    return json.loads(r.take(dlen).decode("utf-8")).get("extra", {})


def _grab(tensors, prefix: str) -> dict:
    out = {}
    p = prefix + "."
    for k in list(tensors):
        if k.startswith(p):
            arr = tensors.pop(k)
            buffer = k.endswith(".running_mean") or k.endswith(".running_var")
            out[k[len(p):]] = Tensor(arr, requires_grad=not buffer)
    return out


def graph_from_descriptor(desc: dict, tensors: "OrderedDict[str, np.ndarray]") -> ArchGraph:
    tensors = OrderedDict(tensors)
    s = desc["stem"]
    stem = StemSpec(s["in_channels"], s["out_channels"], s["kernel"], s["stride"], s["padding"], s["pool"], _grab(tensors, "stem"))
    stages = OrderedDict()
    for st in desc["stages"]:
        blocks = []
        for bd in st["blocks"]:
            params = _grab(tensors, bd["name"])
            blocks.append(
                BlockSpec(
                    name=bd["name"],
                    kind=bd["kind"],
                    stride=bd["stride"],
                    in_channels=bd["in_channels"],
                    mid_channels=bd["mid_channels"],
                    out_channels=bd["out_channels"],
                    has_downsample=bd["has_downsample"],
                    params=params,
                    origin=bd.get("origin"),
                    expand=bd.get("expand", True) if bd["kind"] != BASIC else True,
                )
            )
        stages[st["name"]] = blocks
    h = desc["head"]
    head = HeadSpec(h["in_features"], h["num_classes"], h.get("conv_channels"), _grab(tensors, "head"))
    if tensors:
        raise CheckpointError(f"tensors not claimed by any module: {list(tensors)[:5]}")
    return ArchGraph(desc["family"], stem, stages, head)


def content_hash(graph: ArchGraph) -> str:
    return hashlib.sha256(to_bytes(graph)).hexdigest()
