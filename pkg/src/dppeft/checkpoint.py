"""Checkpoint files: a JSON header followed by raw little-endian float32 tensors.

Layout::

    b"DPPEFT01"  | uint64 LE header length | header (UTF-8 JSON) | tensor bytes

The header lists every tensor with its name, shape, kind, trainable flag,
dtype and byte offset into the tensor region, plus the model config and the
active PEFT config (if any).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import ModelConfig
from .params import Param, ParamStore
from .peft import PeftConfig

MAGIC = b"DPPEFT01"
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamStore, path: str | os.PathLike, meta: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, p in params.items():
        data = np.ascontiguousarray(p.value, dtype=DTYPE).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(p.value.shape),
                "kind": p.kind,
                "trainable": bool(p.trainable),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "model_config": params.config.to_dict(),
        "peft": params.peft.to_dict() if params.peft is not None else None,
        "tensors": tensors,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamStore, dict]:
    """Returns the stored parameters (float32) and the header's ``meta`` dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(buf[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    body = memoryview(buf)[start + hlen :]
    config = ModelConfig.from_dict(header["model_config"])
    peft = PeftConfig.from_dict(header["peft"]) if header.get("peft") else None
    store = ParamStore(config, peft=peft)
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        if t["nbytes"] != n or t["offset"] + n > len(body):
            raise CheckpointError(f"{path}: tensor {t['name']!r} is truncated or has an inconsistent size")
        value = np.frombuffer(body[t["offset"] : t["offset"] + n], dtype=DTYPE).reshape(t["shape"])
        store.add(t["name"], Param(value.astype(np.float32), t["kind"], bool(t["trainable"])))
    return store, header.get("meta", {})
