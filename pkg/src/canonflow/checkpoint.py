"""Little-endian binary tensor archive.

Layout::

    b"SNFK" | u32 version | u32 precision (0 = float32, 1 = float64)
    repeated until EOF:
        u32 name_len | name (utf-8) | u32 ndim | u64 * ndim dims | u8 dtype | raw values

Integer tensors (optimizer step counts) are stored as int64 regardless of
the precision flag; the per-tensor dtype byte records which.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"SNFK"
VERSION = 1

_FLOAT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_FLOAT, _KIND_INT = 0, 1


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], precision: str = "float32") -> None:
    flag = {"float32": 0, "float64": 1}[precision]
    chunks = [MAGIC, struct.pack("<II", VERSION, flag)]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            kind, arr = _KIND_INT, arr.astype("<i8")
        else:
            kind, arr = _KIND_FLOAT, arr.astype(_FLOAT[flag])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", kind))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, flag = struct.unpack_from("<II", buf, 4)
    if version != VERSION or flag not in _FLOAT:
        raise CheckpointError(f"{path}: unsupported version {version} / precision {flag}")
    pos = 12
    out: dict[str, torch.Tensor] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (kind,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dtype = np.dtype("<i8") if kind == _KIND_INT else _FLOAT[flag]
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += count * dtype.itemsize
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    return out


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    ref = module.state_dict()
    with torch.no_grad():
        for k, v in ref.items():
            if k not in own:
                raise CheckpointError(f"missing tensor {prefix + k}")
            v.copy_(own[k].to(v.dtype))
