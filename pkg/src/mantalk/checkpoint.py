"""Single-file checkpoint container.

Layout (little-endian)::

    b"MANCKPT\\0"            8-byte magic
    u32 format version
    u64 header length
    header                  UTF-8 JSON: meta + tensor index (name, dtype, shape, offset, nbytes)
    payload                 raw tensor bytes, in index order
    32-byte SHA-256 of header + payload

The SHA-256 doubles as the checkpoint's content hash.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointMissing, CorruptFile, VersionMismatch

MAGIC = b"MANCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1", "bool": "|b1"}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict
    content_hash: str


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.name not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def encode_checkpoint(tensors: Mapping[str, object], meta: Mapping) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = np.ascontiguousarray(arr.astype(_DTYPES[arr.dtype.name])).tobytes()
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload + digest


def save_checkpoint(path: str | Path, tensors: Mapping[str, object], meta: Mapping) -> str:
    """Write atomically; returns the content hash (hex)."""
    data = encode_checkpoint(tensors, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data[-32:].hex()


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 20 + 32 or data[:8] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint or truncated")
    version, header_len = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = data[20:-32]
    if len(body) < header_len or hashlib.sha256(body).digest() != data[-32:]:
        raise CorruptFile(f"{path}: content hash mismatch (truncated or modified)")
    header = json.loads(body[:header_len])
    payload = body[header_len:]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        raw = payload[start:start + n]
        if len(raw) != n:
            raise CorruptFile(f"{path}: tensor {entry['name']} is truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"])
    return Checkpoint(tensors, header["meta"], data[-32:].hex())


def checkpoint_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return data[-32:].hex()


# --- module / optimizer state ------------------------------------------------------

def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
    p = prefix + "."
    state = {k[len(p):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(p)}
    module.load_state_dict(state, strict=True)


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for key, value in st.items():
            tensors[f"{prefix}.{pid}.{key}"] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
    return tensors, {"param_groups": sd["param_groups"]}


def load_optimizer_tensors(opt: torch.optim.Optimizer, tensors: Mapping[str, np.ndarray], meta: dict, prefix: str) -> None:
    p = prefix + "."
    state: dict[int, dict] = {}
    for k, v in tensors.items():
        if not k.startswith(p):
            continue
        pid, key = k[len(p):].split(".", 1)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(np.array(v))
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
