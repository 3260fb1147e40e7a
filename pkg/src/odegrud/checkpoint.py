"""Binary checkpoints: magic, version, JSON header, little-endian float64 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .missingness import Normalizer
from .models import ModelSpec, SequenceModel, build_model

MAGIC = b"ODEGRUD\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SequenceModel, path) -> None:
    named = model.named_parameters()
    header = {
        "spec": model.spec.to_dict(),
        "n_vars": model.n_vars,
        "means": model.means.tolist(),
        "normalizer": None if model.normalizer is None else {
            "mean": model.normalizer.mean.tolist(), "std": model.normalizer.std.tolist()},
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(header).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + payload)


def load_checkpoint(path) -> SequenceModel:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 8
    try:
        header = json.loads(raw[off: off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen
    model = build_model(ModelSpec.from_dict(header["spec"]), header["n_vars"])
    model.means = np.asarray(header["means"], dtype=np.float64)
    if header["normalizer"] is not None:
        model.normalizer = Normalizer(np.asarray(header["normalizer"]["mean"]),
                                      np.asarray(header["normalizer"]["std"]))
    params = dict(model.named_parameters())
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params or params[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} {shape} does not match the model")
        n = int(np.prod(shape)) * 8
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        params[name].data = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shape)
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return model
