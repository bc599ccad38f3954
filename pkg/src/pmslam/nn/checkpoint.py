"""Binary parameter checkpoints.

Layout (little-endian): magic ``b"PMSL"``, version u32, tensor count u32,
then per tensor: name length u16, UTF-8 name, rank u8, dims as u32, data
as float32. Model metadata travels as ordinary tensors whose names start
with ``__``: ``__kind__.<TAG>`` (empty) and ``__config__``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DatasetError

MAGIC = b"PMSL"
VERSION = 1


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DatasetError(path, f"bad magic {data[:4]!r}", 0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DatasetError(path, f"unsupported checkpoint version {version}", 4)
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise DatasetError(path, f"truncated checkpoint ({exc})", off) from exc
    if off != len(data):
        raise DatasetError(path, f"{len(data) - off} trailing bytes", off)
    return out


def save_module(path, module, kind: str, config: list[float]) -> None:
    """Write a torch module's parameters with a model-kind tag."""
    tensors = {f"__kind__.{kind}": np.zeros(0, dtype=np.float32), "__config__": np.asarray(config, dtype=np.float32)}
    for name, p in module.state_dict().items():
        tensors[name] = p.detach().cpu().numpy()
    write_checkpoint(path, tensors)


def load_tensors(path, kind: str):
    """Return ``(config, state)`` after checking the kind tag."""
    tensors = read_checkpoint(path)
    kinds = [k.split(".", 1)[1] for k in tensors if k.startswith("__kind__.")]
    if kinds != [kind]:
        raise DatasetError(path, f"expected a {kind} checkpoint, found {kinds or 'untagged'}")
    config = tensors.pop("__config__").tolist()
    state = {k: v for k, v in tensors.items() if not k.startswith("__")}
    return config, state
