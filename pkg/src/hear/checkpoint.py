"""Deterministic checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a
canonical JSON header, then raw little-endian tensor bytes in sorted-name
order. No timestamps or pickles, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

MAGIC = b"HEARCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    config_hash: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def add(self, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
        for k, v in tensors.items():
            self.tensors[f"{prefix}.{k}"] = v.detach()

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise ConfigError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "config_hash": self.config_hash,
            "step": self.step,
            "meta": self.meta,
            "tensors": entries,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", self.version, len(hbytes)) + hbytes + b"".join(blobs)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(data[20 : 20 + hlen])
        base = 20 + hlen
        tensors = {}
        for e in header["tensors"]:
            raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
            tensors[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"]), copy=True))
        return cls(header["config_hash"], tensors, header["step"], header["meta"], version)

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None, force: bool = False) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read checkpoint {path}: {e}") from e
        ckpt = cls.from_bytes(data)
        if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
            raise ConfigError(
                f"checkpoint {path} was written for config {ckpt.config_hash}, current config is {expected_hash} "
                "(pass --force to load anyway)"
            )
        return ckpt


def rng_state_tensor(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().clone()


def restore_rng(gen: torch.Generator, state: torch.Tensor) -> None:
    gen.set_state(state.to(torch.uint8))
