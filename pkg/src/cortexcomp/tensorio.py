"""Named-tensor container.

A container is an uncompressed ``.npz`` archive. Every entry is a named
array; the reserved entry ``__meta__`` holds a UTF-8 JSON document with at
least ``format``, ``kind`` and ``fingerprint`` plus a ``shapes`` table that is
checked on load.
"""
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactMissing, FingerprintMismatch, ShapeMismatch
from .surface import CortexMask

FORMAT = "cortexcomp-tensors/1"


def save_tensors(path, tensors, kind, fingerprint, **meta):
    arrays = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value)
    header = {
        "format": FORMAT,
        "kind": kind,
        "fingerprint": fingerprint,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
        **meta,
    }
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    return path


def load_tensors(path, kind=None, fingerprint=None):
    path = Path(path)
    if not path.exists():
        raise ArtifactMissing(f"no such container: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != FORMAT:
        raise FingerprintMismatch(f"{path}: unsupported container format {meta.get('format')!r}")
    if kind is not None and meta.get("kind") != kind:
        raise FingerprintMismatch(f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
    if fingerprint is not None and meta.get("fingerprint") != fingerprint:
        raise FingerprintMismatch(
            f"{path}: fingerprint {meta.get('fingerprint')} does not match expected {fingerprint}"
        )
    for name, shape in meta["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise ShapeMismatch(f"{path}: tensor {name} has shape {arrays[name].shape}, header says {shape}")
    return arrays, meta


def mask_tensors(mask, prefix="mask."):
    return {
        prefix + "active": mask.active.astype(np.uint8),
        prefix + "kept_patches": np.asarray(mask.kept_patches, dtype=np.int64),
        prefix + "patch_size": np.asarray(mask.patch_size, dtype=np.int64),
        prefix + "keep_threshold": np.asarray(mask.keep_threshold, dtype=np.float64),
    }


def mask_from_tensors(arrays, prefix="mask."):
    return CortexMask(
        active=arrays[prefix + "active"].astype(bool),
        patch_size=int(arrays[prefix + "patch_size"]),
        kept_patches=arrays[prefix + "kept_patches"].astype(np.int64),
        keep_threshold=float(arrays[prefix + "keep_threshold"]),
    )


def save_surface(path, values, mask):
    """Surface map(s) with the governing mask; round trip is bit exact."""
    values = np.asarray(values)
    return save_tensors(path, {"values": values, **mask_tensors(mask)}, kind="surface",
                        fingerprint=mask.ref(), mask_ref=mask.ref())


def load_surface(path):
    arrays, meta = load_tensors(path, kind="surface")
    mask = mask_from_tensors(arrays)
    if mask.ref() != meta["mask_ref"]:
        raise FingerprintMismatch(f"{path}: mask does not match its recorded reference")
    return arrays["values"], mask
