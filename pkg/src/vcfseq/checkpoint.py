"""Versioned tensor container shared by the detector and the VCF model.

Layout::

    VSQCKPT1\\n
    key=value\\n            (one line per config/metadata entry, insertion order)
    tensors=<count>\\n
    \\n
    then per tensor:
    <name> <dtype tag> <d0,d1,...>\\n
    <little-endian payload>

Dtype tags are ``f4`` and ``f8``. A scalar has an empty shape field.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"VSQCKPT1\n"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(manifest: dict, tensors: dict) -> bytes:
    parts = [MAGIC]
    for key, value in manifest.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text or key == "tensors":
            raise CheckpointError(f"unencodable manifest entry {key!r}={text!r}")
        parts.append(f"{key}={text}\n".encode())
    parts.append(f"tensors={len(tensors)}\n\n".encode())
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        if " " in name or "\n" in name:
            raise CheckpointError(f"bad tensor name {name!r}")
        shape = ",".join(str(d) for d in arr.shape)
        parts.append(f"{name} {tag} {shape}\n".encode())
        parts.append(arr.astype(_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> tuple[dict, dict]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a VSQCKPT1 checkpoint")
    end = raw.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError("unterminated manifest")
    manifest = {}
    for line in raw[len(MAGIC) : end].decode().split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed manifest line {line!r}")
        manifest[key] = value
    try:
        count = int(manifest.pop("tensors"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError("manifest lacks a tensor count") from exc

    tensors, pos = {}, end + 2
    for _ in range(count):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("truncated tensor header")
        try:
            name, tag, shape_text = raw[pos:nl].decode().split(" ")
            shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
            dtype = _DTYPES[tag]
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"bad tensor header {raw[pos:nl]!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = raw[nl + 1 : nl + 1 + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"tensor {name} truncated")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        pos = nl + 1 + nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last tensor")
    return manifest, tensors


def save_checkpoint(path, manifest: dict, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(manifest, tensors))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
