"""Named parameter store and the on-disk checkpoint format.

A checkpoint is a pair of files: ``<stem>.json`` (manifest listing name,
shape, byte offset, element count per parameter) and ``<stem>.bin``
(little-endian float32 values concatenated in manifest order). Loading a
checkpoint and saving it again reproduces both files byte for byte.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .tensor import ContractError, Tensor


class ParamStore:
    """Ordered mapping from parameter name to a trainable Tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must have requires_grad=True")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_entries(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def checksum(self) -> int:
        """CRC over every parameter value, for before/after-mutation checks."""
        crc = 0
        for name, p in self._params.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data, dtype=np.float64).tobytes(), crc)
        return crc

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, Tensor(p.data.copy(), requires_grad=True))
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, Tensor(p.data.astype(dtype), requires_grad=True))
        return out


def save_checkpoint(store: ParamStore, stem: str | Path):
    """Write ``<stem>.json`` and ``<stem>.bin``."""
    stem = Path(stem)
    manifest = []
    offset = 0
    blobs = []
    for name, p in store.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.numel())}
        )
        blobs.append(raw)
        offset += len(raw)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump({"format": "minidt-checkpoint-v1", "params": manifest}, f, indent=1)
        f.write("\n")
    with open(stem.with_suffix(".bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(stem: str | Path, dtype=np.float32) -> ParamStore:
    """Read a checkpoint back into a fresh ParamStore."""
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "minidt-checkpoint-v1":
        raise ContractError(f"not a checkpoint manifest: {stem.with_suffix('.json')}")
    blob = stem.with_suffix(".bin").read_bytes()
    store = ParamStore()
    for entry in manifest["params"]:
        count = entry["count"]
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arr = arr.reshape(entry["shape"]).astype(dtype)
        store.add(entry["name"], Tensor(arr, requires_grad=True))
    return store
