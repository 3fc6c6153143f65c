"""JSON checkpoint container.

Layout (``format_version`` 1)::

    {
      "format_version": 1,
      "kind": "ectraj-checkpoint",
      "meta": {...},                       # free-form, JSON-serializable
      "groups": {
        "<group>": {                       # e.g. "student", "teacher", "codec"
          "<param name>": {"shape": [d0, d1, ...], "data": [flat row-major floats]}
        }
      }
    }

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


def pack_arrays(named: Mapping[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
        for name, a in named.items()
    }


def unpack_arrays(packed: Mapping[str, dict]) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in packed.items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"checkpoint entry {name!r}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def dumps_checkpoint(groups: Mapping[str, Mapping[str, np.ndarray]], meta: Mapping | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "ectraj-checkpoint",
        "meta": dict(meta or {}),
        "groups": {g: pack_arrays(arrs) for g, arrs in groups.items()},
    }
    return json.dumps(doc, sort_keys=True)


def save_checkpoint(path, groups, meta=None) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    text = dumps_checkpoint(groups, meta)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    groups = {g: unpack_arrays(p) for g, p in doc["groups"].items()}
    return groups, doc.get("meta", {})
