"""Checkpoints: ``manifest.json`` plus one little-endian f32 ``.raw`` file per tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, IoError


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    root = Path(path)
    tensors = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for i, (name, p) in enumerate(params.items()):
            value = p.value if hasattr(p, "value") else p
            fname = f"{i:03d}_{name.replace('.', '_')}.raw"
            (root / fname).write_bytes(np.asarray(value).astype("<f4").tobytes(order="C"))
            tensors.append({"name": name, "shape": list(value.shape), "file": fname})
        manifest = {"format": "cascade-seg-checkpoint/1", "dtype": "f32",
                    "tensors": tensors, "meta": meta or {}}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {root}: {exc}") from exc


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise IoError(f"no checkpoint manifest in {root}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad checkpoint manifest in {root}: {exc}") from exc
    arrays = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        try:
            raw = (root / t["file"]).read_bytes()
        except OSError as exc:
            raise IoError(f"missing tensor file {t['file']} in {root}") from exc
        if len(raw) != 4 * int(np.prod(shape)):
            raise FormatError(f"tensor {t['name']} payload does not match shape {shape}")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, manifest.get("meta", {})


def load_into(params: dict, arrays: dict[str, np.ndarray]) -> None:
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise FormatError(f"checkpoint tensors do not match network: {missing[:5]}")
    for name, p in params.items():
        if p.value.shape != arrays[name].shape:
            raise FormatError(f"shape mismatch for {name}: {p.value.shape} vs {arrays[name].shape}")
        p.value[...] = arrays[name]
