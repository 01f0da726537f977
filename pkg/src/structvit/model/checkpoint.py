"""Binary tensor container.

Layout: ``b"VIVD"``, u32 version, u64 header length, UTF-8 JSON header, then
contiguous little-endian float64 payloads. The header maps tensor names to
shape, dtype and byte offset (relative to the payload start) and carries a
free-form ``meta`` object. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from structvit.model import layers
from structvit.model.vit import VitConfig
from structvit.numerics import Tensor

MAGIC = b"VIVD"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    pass


def encode_container(tensors: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    index = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index[name] = {"shape": list(arr.shape), "dtype": "<f8", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": index, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode_container(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _PREAMBLE.size:
        raise CheckpointFormatError("file too short for a container preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported container version {version}")
    start = _PREAMBLE.size
    if len(data) < start + hlen:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        index = header["tensors"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    payload = memoryview(data)[start + hlen :]
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in index.values())
    if len(payload) != expected:
        raise CheckpointFormatError(f"payload is {len(payload)} bytes, header describes {expected}")
    tensors = {}
    for name, e in index.items():
        if e.get("dtype") != "<f8":
            raise CheckpointFormatError(f"{name}: unsupported dtype {e.get('dtype')!r}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        off = int(e["offset"])
        if off < 0 or off + 8 * n > len(payload):
            raise CheckpointFormatError(f"{name}: offset out of range")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(e["shape"]).astype(np.float64)
    return tensors, meta


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    atomic_write_bytes(path, encode_container(tensors, meta))


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# deployable backbone
# ---------------------------------------------------------------------------

BACKBONE_PREFIX = "vit."


class DeploymentContractError(CheckpointFormatError):
    pass


def export_backbone(checkpoint_path: str | Path, out_path: str | Path) -> None:
    """Keep only encoder tensors and the encoder config."""
    tensors, meta = load_container(checkpoint_path)
    if meta.get("backbone"):
        raise CheckpointFormatError("input is already a backbone")
    vit_cfg = meta["config"]["model"]["vit"]
    kept = {n: a for n, a in tensors.items() if n.startswith(BACKBONE_PREFIX)}
    save_container(out_path, kept, {"kind": "backbone", "backbone": True, "vit": vit_cfg, "source_step": meta.get("step")})


def load_backbone(path: str | Path):
    """Return (VitConfig, params); refuses any file carrying non-encoder tensors."""
    tensors, meta = load_container(path)
    foreign = sorted(n for n in tensors if not n.startswith(BACKBONE_PREFIX))
    if foreign:
        raise DeploymentContractError(f"backbone file carries non-encoder tensors, e.g. {foreign[:3]}")
    if not meta.get("backbone"):
        raise DeploymentContractError("file is not flagged as a backbone export")
    cfg = VitConfig(**meta["vit"])
    params: layers.Params = {n: Tensor(a, requires_grad=False, name=n) for n, a in tensors.items()}
    return cfg, params
