"""Versioned checkpoint container.

Layout: ``b"SVSK"``, one format-version byte, a little-endian uint32 manifest
length, the UTF-8 JSON manifest, then each parameter as raw little-endian
float64 in manifest order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SVSK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, state, config, kind):
    names = list(state)
    manifest = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "params": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def _header(raw, path):
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {raw[4]}")
    (size,) = struct.unpack("<I", raw[5:9])
    return json.loads(raw[9:9 + size]), 9 + size


def read_manifest(path):
    return _header(Path(path).read_bytes(), path)[0]


def load_checkpoint(path, expected_kind=None, expected_config=None):
    """Return ``(state, manifest)``; refuses mismatched kind or config hash."""
    raw = Path(path).read_bytes()
    manifest, offset = _header(raw, path)
    if expected_kind is not None and manifest["kind"] != expected_kind:
        raise CheckpointError(f"{path}: holds a {manifest['kind']!r} model, "
                              f"expected {expected_kind!r}")
    if expected_config is not None and manifest["config_hash"] != config_hash(expected_config):
        raise CheckpointError(f"{path}: config hash {manifest['config_hash']} does not match "
                              f"{config_hash(expected_config)}")
    state = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(
            entry["shape"]).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return state, manifest
