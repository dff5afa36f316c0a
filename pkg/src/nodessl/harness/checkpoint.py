"""Checkpoint files: a JSON manifest plus one little-endian binary payload.

Layout of a checkpoint directory::

    manifest.json   {"format", "version", "payload", "payload_bytes",
                     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}], "meta"}
    weights.bin     tensors back to back in manifest order
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "nodessl-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "weights.bin"
_DTYPES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, mismatches: list[str]):
        super().__init__("incompatible checkpoint:\n  " + "\n  ".join(mismatches))
        self.mismatches = mismatches


def save(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value)
        tag = "f32" if arr.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "payload": PAYLOAD,
        "payload_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, meta)``; raises a distinct error per failure mode."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise VersionMismatchError(
            f"checkpoint {path} has format/version {manifest.get('format')}/{manifest.get('version')},"
            f" expected {FORMAT}/{VERSION}"
        )
    payload = (path / manifest["payload"]).read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise TruncatedPayloadError(
            f"payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )
    params = {}
    for e in manifest["tensors"]:
        if e["name"] in params:
            raise CheckpointError(f"tensor {e['name']!r} listed twice")
        dtype = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + count * dtype.itemsize > len(payload):
            raise TruncatedPayloadError(f"tensor {e['name']!r} runs past the end of the payload")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return params, manifest.get("meta", {})


def digest(path) -> str:
    """SHA-256 over manifest and payload bytes."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / PAYLOAD).read_bytes())
    return h.hexdigest()


def assign(named: dict, loaded: dict[str, np.ndarray], prefixes=("encoder.", "projector.", "field.")) -> list[str]:
    """Copy matching tensors from ``loaded`` into model tensors ``named``.

    Only names under ``prefixes`` are transferred. Any shape disagreement
    or missing tensor raises :class:`ShapeMismatchError` listing all of them.
    """
    wanted = [n for n in named if n.startswith(tuple(prefixes))]
    problems = []
    for n in wanted:
        if n not in loaded:
            problems.append(f"{n}: missing from checkpoint")
        elif tuple(loaded[n].shape) != tuple(named[n].shape):
            problems.append(f"{n}: checkpoint {tuple(loaded[n].shape)} vs model {tuple(named[n].shape)}")
    if problems:
        raise ShapeMismatchError(problems)
    for n in wanted:
        named[n].data = loaded[n].astype(named[n].data.dtype, copy=True)
    return wanted
