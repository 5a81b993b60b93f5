"""Named parameter registry with a flat binary checkpoint format.

Layout on disk: 8-byte little-endian uint64 header length, UTF-8 JSON
header mapping name -> {"shape": [...], "byte_offset": int}, then the
concatenated raw float32 little-endian buffers. Offsets are relative to
the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ModelBundle:

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32),
                   requires_grad=requires_grad, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def put(self, name: str, tensor: Tensor) -> Tensor:
        """Swap an existing parameter for another tensor object (used to
        check gradients of a model wrt one parameter)."""
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = tensor
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items()
                if v.requires_grad and k.startswith(prefix)}

    def freeze(self, prefix: str = ""):
        for k, t in self._params.items():
            if k.startswith(prefix):
                t.requires_grad = False
                t.grad = None

    def unfreeze(self, prefix: str = ""):
        for k, t in self._params.items():
            if k.startswith(prefix):
                t.requires_grad = True
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def checksum(self, prefix: str = "") -> str:
        """sha256 over the sorted names and raw float32 bytes under prefix."""
        h = hashlib.sha256()
        for k in sorted(self._params):
            if not k.startswith(prefix):
                continue
            h.update(k.encode("utf-8"))
            h.update(np.ascontiguousarray(
                self._params[k].data, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, path: str):
        header: dict[str, dict] = {}
        offset = 0
        blobs = []
        for k, t in self._params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            header[k] = {"shape": list(t.data.shape), "byte_offset": offset}
            blobs.append(raw)
            offset += len(raw)
        head = json.dumps(header).encode("utf-8")
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for b in blobs:
                f.write(b)

    @classmethod
    def load(cls, path: str) -> "ModelBundle":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 8:
            raise ValueError(f"checkpoint {path!r} truncated")
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        payload = raw[8 + hlen:]
        bundle = cls()
        for name, entry in header.items():
            shape = tuple(entry["shape"])
            start = entry["byte_offset"]
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                payload, dtype="<f4", count=count, offset=start).reshape(shape)
            bundle.add(name, arr.copy())
        return bundle
