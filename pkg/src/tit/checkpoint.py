"""Checkpoint directory: ``manifest.json`` plus one little-endian float64 blob."""
import json
import os

import numpy as np

from .model import ModelConfig, TITModel, register_model
from .nn import ParamStore

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "tit-checkpoint/1"


def save(model: TITModel, path, extra=None):
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, e in model.store.items():
        arr = np.ascontiguousarray(e.tensor.data, dtype="<f8")
        entries.append({"name": name, "shape": list(e.shape),
                        "owner": "shared" if e.owner is None else e.owner,
                        "kind": e.kind, "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT, "dtype": "<f8", "config": model.cfg.to_dict(),
                "params": entries, "total_bytes": offset}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, BLOB), "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load(path) -> TITModel:
    with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    blob = np.fromfile(os.path.join(path, BLOB), dtype="<f8")
    arrays = {}
    for ent in manifest["params"]:
        start = ent["offset"] // 8
        count = ent["nbytes"] // 8
        arrays[ent["name"]] = blob[start:start + count].reshape(ent["shape"]).astype(np.float64)
    store = ParamStore()
    register_model(store, cfg)
    missing = set(store.names()) ^ set(arrays)
    if missing:
        raise ValueError(f"{path}: manifest and architecture disagree on {sorted(missing)[:5]}")
    store.load_state(arrays)
    return TITModel(cfg, store=store)
