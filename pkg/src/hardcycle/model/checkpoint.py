"""Checkpoint files: a JSON manifest plus an adjacent little-endian float32 blob."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adam import AdamState
from .net import ModelParams, ModelSpec, init_params, param_shapes

FORMAT = "hardcycle-checkpoint/1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ModelParams
    adam: AdamState
    meta: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, spec: ModelSpec, **meta) -> "Checkpoint":
        params = init_params(spec)
        return cls(spec, params, AdamState.zeros_like(params), dict(meta))

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, self.params.copy(),
                          AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.t,
                                    self.adam.beta1, self.adam.beta2, self.adam.eps),
                          json.loads(json.dumps(self.meta)))


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``path`` (manifest) and ``path.with_suffix('.bin')`` (tensors)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    groups = (("params", ckpt.params), ("adam.m", ckpt.adam.m), ("adam.v", ckpt.adam.v))
    for group, tensors in groups:
        for name, shape in param_shapes(ckpt.spec):
            arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
            entries.append({"group": group, "name": name, "shape": list(shape),
                            "offset": offset, "count": int(arr.size)})
            chunks.append(arr.tobytes())
            offset += arr.size
    manifest = {
        "format": FORMAT,
        "spec": ckpt.spec.to_dict(),
        "dtype": "float32-le",
        "blob": _blob_path(path).name,
        "tensors": entries,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "meta": ckpt.meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, spec: ModelSpec = None) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        raw = (path.parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    try:
        stored = ModelSpec.from_dict(manifest["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid spec ({exc})") from exc
    if spec is not None and stored != spec:
        raise CheckpointError(f"{path}: checkpoint spec {stored} does not match {spec}")
    if len(raw) % _DTYPE.itemsize:
        raise CheckpointError(f"{path}: truncated tensor blob")
    flat = np.frombuffer(raw, dtype=_DTYPE)
    expected = dict(param_shapes(stored))
    groups = {"params": {}, "adam.m": {}, "adam.v": {}}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if expected.get(e["name"]) != shape or e["group"] not in groups:
            raise CheckpointError(f"{path}: tensor {e['group']}/{e['name']} {shape} does not match the spec")
        end = e["offset"] + e["count"]
        if e["count"] != int(np.prod(shape)) or end > flat.size:
            raise CheckpointError(f"{path}: corrupt tensor table")
        groups[e["group"]][e["name"]] = flat[e["offset"]:end].reshape(shape).astype(np.float32)
    for g in groups.values():
        if set(g) != set(expected):
            raise CheckpointError(f"{path}: missing tensors in manifest")
    order = [n for n, _ in param_shapes(stored)]

    def bundle(g):
        return ModelParams(stored, {n: g[n] for n in order})

    a = manifest["adam"]
    adam = AdamState(bundle(groups["adam.m"]), bundle(groups["adam.v"]), int(a["t"]),
                     a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(stored, bundle(groups["params"]), adam, manifest.get("meta", {}))


__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "init_params"]
