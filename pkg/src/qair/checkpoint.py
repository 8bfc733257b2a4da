"""Named-array archives (``.npz``) with a JSON metadata header.

Tensors round-trip bit-exactly. Nested state (optimizer state dicts, RNG
states) is flattened into dotted keys; non-array leaves go into the
metadata header.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch

META_KEY = "__meta__"


def _to_numpy(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy().copy()
    return np.asarray(v)


def save_archive(path, arrays: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: _to_numpy(v) for k, v in arrays.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_archive(path) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != META_KEY}
        meta = json.loads(z[META_KEY].tobytes().decode()) if META_KEY in z.files else {}
    return arrays, meta


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True, default=str).encode()).hexdigest()[:16]


def flatten_state(state, prefix: str = "") -> tuple[dict, dict]:
    """Split nested dict/list state into ``(arrays, json_leaves)`` keyed by dotted path."""
    arrays, leaves = {}, {}
    if isinstance(state, dict):
        items = state.items()
    elif isinstance(state, (list, tuple)):
        items = enumerate(state)
    else:
        items = None
    if items is None:
        if isinstance(state, (torch.Tensor, np.ndarray)):
            arrays[prefix] = _to_numpy(state)
        else:
            leaves[prefix] = state
        return arrays, leaves
    kind = "d" if isinstance(state, dict) else "l"
    leaves[prefix + "#"] = [kind, [str(k) for k, _ in (state.items() if kind == "d" else enumerate(state))],
                            [type(k).__name__ for k in (state.keys() if kind == "d" else range(len(state)))]]
    for k, v in items:
        a, l = flatten_state(v, f"{prefix}.{k}" if prefix else str(k))
        arrays.update(a)
        leaves.update(l)
    return arrays, leaves


def unflatten_state(arrays: dict, leaves: dict, prefix: str = "", as_tensor: bool = True):
    key = prefix + "#"
    if key not in leaves:
        if prefix in arrays:
            a = arrays[prefix]
            return torch.from_numpy(np.array(a)) if as_tensor else a
        return leaves[prefix]
    kind, names, types = leaves[key]
    children = [unflatten_state(arrays, leaves, f"{prefix}.{n}" if prefix else n, as_tensor) for n in names]
    if kind == "l":
        return children
    keys = [int(n) if t == "int" else n for n, t in zip(names, types)]
    return dict(zip(keys, children))


def save_state(path, state: dict, meta: dict | None = None) -> Path:
    arrays, leaves = flatten_state(state)
    return save_archive(path, arrays, {"meta": meta or {}, "leaves": leaves})


def load_state(path) -> tuple[dict, dict]:
    arrays, header = load_archive(path)
    return unflatten_state(arrays, header["leaves"]), header.get("meta", {})
