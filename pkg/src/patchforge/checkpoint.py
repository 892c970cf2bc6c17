"""Binary checkpoint format.

Layout::

    b"ADNCKPT1"
    UTF-8 JSON header terminated by b"\\n"
    little-endian float32 blobs, tightly packed in directory order

The header holds the architecture descriptor, the tensor directory
(name, shape, dtype, byte offset, kind) and a 64-bit FNV-1a checksum of the
blob section as a hex string.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from patchforge.errors import CheckpointError, MissingInputError
from patchforge.models import Network, build_model

MAGIC = b"ADNCKPT1"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK
    return h


def _entries(model: Network):
    for name, p in model.named_parameters().items():
        yield name, "param", p.data
    for name, b in model.named_buffers().items():
        yield name, "buffer", b


def checkpoint_bytes(model: Network) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, kind, arr in _entries(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "kind": kind, "shape": list(arr.shape),
                          "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    header = {
        "format": FORMAT_VERSION,
        "architecture": model.arch,
        "tensors": directory,
        "checksum": f"{fnv1a64(blob):016x}",
        "blob_bytes": len(blob),
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + text + b"\n" + blob


def save_checkpoint(model: Network, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> Network:
    """Rebuild the saved network in evaluation mode."""
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


def checkpoint_from_bytes(data: bytes) -> Network:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    blob = data[nl + 1:]
    if len(blob) != header.get("blob_bytes"):
        raise CheckpointError(f"blob section is {len(blob)} bytes, header says {header.get('blob_bytes')}")
    if f"{fnv1a64(blob):016x}" != header.get("checksum"):
        raise CheckpointError("checksum mismatch: blob section is corrupted")

    model = build_model(header["architecture"], dtype=np.float32, seed=None)
    params = model.named_parameters()
    buffer_owners = {}
    for path, mod in model.modules():
        for bname in mod.own_buffers():
            buffer_owners[f"{path}.{bname}" if path else bname] = (mod, bname)
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if entry.get("dtype") != "<f4":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob) or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: blob extent does not match its shape")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        arr = arr.astype(np.float32)
        if entry["kind"] == "param" and name in params:
            p = params[name]
            if p.shape != shape:
                raise CheckpointError(f"{name}: shape {shape} != model {p.shape}")
            arr.flags.writeable = False
            p.data = arr
        elif entry["kind"] == "buffer" and name in buffer_owners:
            mod, bname = buffer_owners[name]
            mod.set_buffer(bname, arr)
        else:
            raise CheckpointError(f"unknown tensor name {name!r}")
        seen.add(name)
    missing = (set(params) | set(buffer_owners)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.eval()
    return model
