"""Self-describing binary model container.

Layout (all integers little-endian)::

    8 bytes   magic  b"OTDRMTL\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header (arch, feature set, loss weights, block index, provenance)
    ...       float64 LE parameter blocks in header order
    32 bytes  SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import LoadError
from .model import ArchSpec, ModelParams

MAGIC = b"OTDRMTL\x00"
FORMAT_VERSION = 1
_DIGEST = 32


def _blocks(model: ModelParams) -> dict[str, np.ndarray]:
    blocks = dict(model.params)
    if model.aux_mean is not None:
        blocks["aux.mean"] = model.aux_mean
        blocks["aux.std"] = model.aux_std
    return blocks


def dump_model(model: ModelParams) -> bytes:
    blocks = _blocks(model)
    header = {
        "arch": asdict(model.arch),
        "feature_set": list(model.feature_set),
        "loss_weights": list(model.loss_weights),
        "reflectance_range": list(model.reflectance_range),
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
        "provenance": model.provenance,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in blocks.values())
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + body
    return payload + hashlib.sha256(payload).digest()


def save_model(model: ModelParams, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_model(model))
    os.replace(tmp, path)
    return path


def parse_model(raw: bytes) -> ModelParams:
    if len(raw) < len(MAGIC) + 8 + _DIGEST:
        raise LoadError("model file truncated: checksum missing")
    payload, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise LoadError("model file checksum mismatch (corrupt or truncated)")
    if payload[:len(MAGIC)] != MAGIC:
        raise LoadError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", payload, len(MAGIC))
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    header = json.loads(payload[start:start + hlen])
    offset = start + hlen
    blocks = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=int))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        blocks[entry["name"]] = arr.astype(float).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise LoadError("model file has trailing or missing parameter bytes")
    arch = ArchSpec(**header["arch"])
    mean = blocks.pop("aux.mean", None)
    std = blocks.pop("aux.std", None)
    expected = arch.param_shapes()
    if {k: v.shape for k, v in blocks.items()} != expected:
        raise LoadError("parameter blocks do not match the stored architecture")
    return ModelParams(arch, blocks, tuple(header["loss_weights"]), tuple(header["feature_set"]),
                       mean, std, tuple(header["reflectance_range"]), header["provenance"])


def load_model(path) -> ModelParams:
    return parse_model(Path(path).read_bytes())
