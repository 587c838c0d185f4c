"""Parameter checkpoints: JSON manifest plus a flat little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import ParamStore

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParamStore | dict, directory, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    values = store.numpy() if isinstance(store, ParamStore) else store
    entries, chunks, offset = [], [], 0
    for name, arr in values.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": CHECKPOINT_FORMAT_VERSION, "params": entries,
                "meta": meta or {}}
    (d / "params.bin").write_bytes(b"".join(chunks))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    blob = (d / "params.bin").read_bytes()
    values = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        values[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return values, manifest.get("meta", {})


def load_into(store: ParamStore, directory) -> dict:
    """Copy a checkpoint into ``store``; every name and shape must match."""
    values, meta = load_checkpoint(directory)
    missing = set(store.names()) - set(values)
    extra = set(values) - set(store.names())
    if missing or extra:
        raise CheckpointError(
            f"checkpoint parameters differ from model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, arr in values.items():
        expected = tuple(store[name].shape)
        if arr.shape != expected:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {expected}"
            )
    store.load(values)
    return meta


def checkpoint_io(store: ParamStore, path, direction: str, meta: dict | None = None):
    if direction == "save":
        save_checkpoint(store, path, meta)
        return None
    if direction == "load":
        load_into(store, path)
        return store
    raise ValueError("direction must be 'save' or 'load'")
