"""Single-file weight checkpoints.

Layout: an 8-byte magic, a little-endian uint64 manifest length, a UTF-8
JSON manifest, then the raw tensor payload. Every tensor is stored
little-endian and C-contiguous at the offset recorded in the manifest, so
individual tensors are addressable without deserializing the whole file.
The manifest carries the backbone spec hash, stage index, seed, and epoch;
loading validates it against the requesting spec.
"""

from __future__ import annotations

import hashlib
import json
import time

import numpy as np
import torch
from torch import nn

from .backbones import BackboneSpec
from .errors import CheckpointError

MAGIC = b"DGCKPT01"
FORMAT_VERSION = 1


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot all parameters and buffers as little-endian numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        out[name] = arr.astype(arr.dtype.newbyteorder("<"), copy=True)
    return out


def save_checkpoint(path, module: nn.Module, *, spec: BackboneSpec,
                    stage_index: int, seed: int, epoch: int,
                    head_role: str = "", extra: dict | None = None) -> str:
    arrays = state_arrays(module)
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "spec_hash": spec.stable_hash(),
        "backbone": spec.to_dict(),
        "stage_index": stage_index,
        "seed": seed,
        "epoch": epoch,
        "head_role": head_role,
        "created_unix": time.time(),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())
    return str(path)


def load_checkpoint(path, expected_spec: BackboneSpec | None = None
                    ) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a depthgrow checkpoint")
    mlen = int.from_bytes(raw[len(MAGIC): len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + mlen
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8: header_end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    if manifest.get("byte_order") != "little":
        raise CheckpointError(f"{path}: unsupported byte order")
    if expected_spec is not None:
        want = expected_spec.stable_hash()
        got = manifest.get("spec_hash")
        if want != got:
            raise CheckpointError(
                f"{path}: checkpoint was written for backbone {got}, "
                f"but the requesting spec hashes to {want}"
            )
    payload = raw[header_end:]
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: tensor {entry['name']} extends past end of file "
                f"(need {start + nbytes} payload bytes, have {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64))
                            if entry["shape"] else 1,
                            offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, tensors


def restore_state(module: nn.Module, tensors: dict[str, np.ndarray],
                  prefix: str = "") -> None:
    """Load ``tensors`` (optionally those under ``prefix``) into ``module``.

    With a prefix, only matching entries are restored and the rest of the
    module is left untouched; without one, the name sets must match exactly.
    """
    if prefix:
        subset = {k: v for k, v in tensors.items() if k.startswith(prefix)}
        state = {k: torch.from_numpy(v.copy()) for k, v in subset.items()}
        missing, unexpected = module.load_state_dict(state, strict=False)
        missing_under_prefix = [m for m in missing if m.startswith(prefix)]
        if missing_under_prefix or unexpected:
            raise CheckpointError(
                f"checkpoint does not cover requested prefix {prefix!r}: "
                f"missing {missing_under_prefix}, unexpected {unexpected}"
            )
    else:
        state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(str(exc)) from exc


def payload_hash(module_or_arrays) -> str:
    """SHA-256 over the canonical (name-sorted, little-endian) weight bytes."""
    arrays = (module_or_arrays if isinstance(module_or_arrays, dict)
              else state_arrays(module_or_arrays))
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(arrays[name].tobytes())
    return h.hexdigest()
