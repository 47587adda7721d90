"""Repo-wide checkpoint container.

Layout: the magic ``GEMCKPT1`` followed by repeated records
[uint16 name-length][utf-8 name][uint8 dtype code][uint8 rank][uint32 dims ...]
[raw little-endian data]. Records are written in sorted name order so that
save -> load -> save is byte-identical. Three reserved records carry metadata:
``__config__`` (JSON as uint8 bytes), ``__step__`` (int64 scalar), and
``__hash__`` (sha256 of every preceding byte), which is always written last.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"GEMCKPT1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("<u4"): 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int
    content_hash: str


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.dtype("bool"):
        arr = arr.astype("u1")
    native = arr.dtype.newbyteorder("<")
    if native not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype} for record {name!r}")
    name_b = name.encode("utf-8")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", _DTYPE_CODES[native], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(native).tobytes()


def save_checkpoint(
    path: str | os.PathLike,
    tensors: dict[str, np.ndarray],
    config: dict | None = None,
    step: int = 0,
) -> str:
    """Write a checkpoint and return its content hash (hex)."""
    for reserved in ("__config__", "__step__", "__hash__"):
        if reserved in tensors:
            raise ValueError(f"{reserved} is a reserved record name")
    payload = bytearray(CHECKPOINT_MAGIC)
    cfg_bytes = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    payload += _encode_record("__config__", np.frombuffer(cfg_bytes, dtype="u1"))
    payload += _encode_record("__step__", np.array(step, dtype="<i8"))
    for name in sorted(tensors):
        payload += _encode_record(name, tensors[name])
    digest = hashlib.sha256(bytes(payload)).digest()
    payload += _encode_record("__hash__", np.frombuffer(digest, dtype="u1"))
    with open(path, "wb") as f:
        f.write(bytes(payload))
    return digest.hex()


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read a checkpoint, verifying the magic and the stored content hash."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, np.ndarray] = {}
    hash_start = None
    while off < len(blob):
        record_start = off
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims)
        off += count * dtype.itemsize
        if name == "__hash__":
            hash_start = record_start
            meta[name] = arr
        elif name in ("__config__", "__step__"):
            meta[name] = arr
        else:
            tensors[name] = arr.copy()
    if "__hash__" not in meta or hash_start is None:
        raise ValueError(f"{path}: missing content hash record")
    expected = hashlib.sha256(blob[:hash_start]).digest()
    stored = meta["__hash__"].tobytes()
    if stored != expected:
        raise ValueError(f"{path}: content hash mismatch (corrupt checkpoint)")
    config = json.loads(meta["__config__"].tobytes().decode("utf-8"))
    step = int(meta["__step__"])
    return Checkpoint(tensors, config, step, stored.hex())


def module_state(module) -> dict[str, np.ndarray]:
    """Torch module state dict as float32/int numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        out[name] = arr
    return out


def load_module_state(module, tensors: dict[str, np.ndarray]) -> None:
    import torch

    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
    module.load_state_dict(state)
