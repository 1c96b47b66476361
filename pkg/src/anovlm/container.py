"""Versioned binary container for arrays plus JSON metadata.

One format backs both weight checkpoints and the synthetic corpus files.

Layout (little-endian throughout):

    bytes 0:8    magic, one of b"AVWBLOB1" / b"AVCORPUS"
    bytes 8:12   uint32 format version (currently 1)
    bytes 12:16  uint32 header length N
    bytes 16:16+N  UTF-8 JSON header:
        {"meta": {...}, "entries": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    16+N:        payload; each entry is a C-order array at `offset` bytes into
                 the payload region.

JSON is dumped with sorted keys and no whitespace so identical content yields
identical bytes. Allowed dtypes: uint8, int32, int64, float32, float64.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
WEIGHT_MAGIC = b"AVWBLOB1"
CORPUS_MAGIC = b"AVCORPUS"

_ALLOWED_DTYPES = {"uint8", "int32", "int64", "float32", "float64"}


class ContainerError(RuntimeError):
    pass


def write_container(path: str | Path, magic: bytes, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries = []
    payload_parts = []
    offset = 0
    for name in sorted(arrays):
        src = np.asarray(arrays[name])
        # ascontiguousarray promotes 0-d to 1-d, so keep the source shape
        arr = np.ascontiguousarray(src)
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ContainerError(f"{name}: dtype {arr.dtype.name} not supported")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(src.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payload_parts.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for part in payload_parts:
            fh.write(part)


def read_container(path: str | Path, expect_magic: bytes | None = None
                   ) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (meta, arrays). Raises ContainerError on any malformed input."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise ContainerError(f"{path}: truncated container (got {len(blob)} bytes)")
    magic = blob[:8]
    if expect_magic is not None and magic != expect_magic:
        raise ContainerError(
            f"{path}: bad magic {magic!r}, expected {expect_magic!r}")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    if len(blob) < 16 + header_len:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt JSON header: {exc}") from exc
    payload = blob[16 + header_len:]
    arrays = {}
    for entry in header["entries"]:
        name, dtype, shape = entry["name"], entry["dtype"], entry["shape"]
        off, nbytes = entry["offset"], entry["nbytes"]
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"{path}: entry {name}: bad dtype {dtype}")
        if off + nbytes > len(payload):
            raise ContainerError(f"{path}: entry {name}: payload out of range")
        arr = np.frombuffer(payload[off:off + nbytes], dtype=np.dtype(dtype))
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise ContainerError(
                f"{path}: entry {name}: size {arr.size} != shape {shape}")
        arrays[name] = arr.reshape(shape).copy()
    return header.get("meta", {}), arrays


def save_state_dict(path: str | Path, state: dict, meta: dict | None = None) -> None:
    """Torch state_dict -> container. Tensors stored as float32/int64 arrays."""
    arrays = {}
    for key, value in state.items():
        arrays[key] = value.detach().cpu().numpy()
    write_container(path, WEIGHT_MAGIC, arrays, meta)


def load_state_dict(path: str | Path) -> tuple[dict, dict]:
    """Returns (meta, {name: torch.Tensor})."""
    import torch

    meta, arrays = read_container(path, expect_magic=WEIGHT_MAGIC)
    return meta, {k: torch.from_numpy(v) for k, v in arrays.items()}
