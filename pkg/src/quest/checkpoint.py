"""Named-tensor checkpoint container, shared by models and the harness.

Layout: uint32 little-endian header length, then a UTF-8 text header, then
raw little-endian float payloads. Header line 0 is the format tag; each
following line is "<name> <dtype> <d0>x<d1>x... <payload-offset>". Entries
are sorted by name so save -> load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_TAG = "QTNSR 1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    lines = [_TAG]
    payloads = []
    offset = 0
    for name in names:
        if any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name {name!r} contains whitespace")
        arr = tensors[name]
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
        dims = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
        lines.append(f"{name} {dtype} {dims} {offset}")
        payloads.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<I", data[:4])
    if len(data) < 4 + hlen:
        raise FormatError(f"{path}: header extends past end of file")
    try:
        header = data[4:4 + hlen].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: header is not UTF-8") from e
    lines = header.strip("\n").split("\n")
    if not lines or lines[0] != _TAG:
        raise FormatError(f"{path}: bad container tag")
    payload = data[4 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        parts = line.split(" ")
        if len(parts) != 4:
            raise FormatError(f"{path}: malformed header line {line!r}")
        name, dtype, dims, off = parts
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {dtype!r}")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape)) if shape else 1
        start = int(off)
        nbytes = count * np.dtype(_DTYPES[dtype]).itemsize
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: payload for {name!r} out of bounds")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPES[dtype])
        tensors[name] = arr.reshape(shape).astype(dtype)
    return tensors
