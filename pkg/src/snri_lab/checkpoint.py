"""Versioned JSON checkpoints: ``{name: {shape, values}}`` plus free-form metadata.

Floats are written with ``repr`` precision and keys are sorted, so identical
parameters always produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpoint, IoError

FORMAT = "snri_lab.checkpoint"
VERSION = 1


def dumps(groups: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> str:
    params = {}
    for group, state in groups.items():
        for name, value in state.items():
            arr = np.asarray(value, dtype=np.float64)
            params[f"{group}/{name}"] = {"shape": list(arr.shape),
                                         "values": [float(v) for v in arr.reshape(-1)]}
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "params": params}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads(text: str) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IncompatibleCheckpoint(f"not a checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise IncompatibleCheckpoint(
            f"expected {FORMAT} v{VERSION}, got {doc.get('format')} v{doc.get('version')}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, entry in doc["params"].items():
        group, _, name = key.partition("/")
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise IncompatibleCheckpoint(f"{key}: {values.size} values for shape {shape}")
        groups.setdefault(group, {})[name] = values.reshape(shape)
    return groups, doc.get("meta", {})


def save(path, groups: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(dumps(groups, meta))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def load(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return loads(text)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
