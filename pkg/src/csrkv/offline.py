"""The CSRD offline dictionary file.

Layout (little-endian)::

    b"CSRD" | u32 version | u32 meta_len | meta (UTF-8 JSON) |
    entries: (u32 group, u32 head, u32 chunk, chunk_dim*per_head_atoms f32, column-major)*

Entries are written in ascending (group, head, chunk) order.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calib_io import Kind
from .codec import Dictionary, Provenance
from .layer_merge import MergePlan

MAGIC = b"CSRD"
VERSION = 1
_KEY = struct.Struct("<III")


class DictionaryFileError(ValueError):
    pass


@dataclass(eq=False)
class OfflineDictionary:
    """Trained dictionaries keyed by (group index, head, chunk position)."""

    kind: Kind
    chunk_dim: int
    s_n: int
    per_head_atoms: int
    plan: MergePlan
    num_heads: int
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    head_shared: bool = False
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind(self.kind)
        for key, d in self.entries.items():
            if d.chunk_dim != self.chunk_dim or d.num_atoms != self.per_head_atoms:
                raise DictionaryFileError(
                    f"entry {key} has shape {d.atoms.shape}, expected "
                    f"({self.chunk_dim}, {self.per_head_atoms})"
                )

    @property
    def head_dim(self) -> int:
        return self.chunk_dim * self.s_n

    def slices(self, layer: int, head: int) -> list[Dictionary]:
        """The per-chunk dictionaries serving ``layer`` (via its merge group) and ``head``."""
        g = self.plan.group_of(layer)
        try:
            return [self.entries[(g, head, c)] for c in range(self.s_n)]
        except KeyError as exc:
            raise KeyError(f"no offline dictionary for group {g}, head {head}: {exc}") from None

    def metadata(self) -> dict:
        return {
            "kind": self.kind.value,
            "chunk_dim": self.chunk_dim,
            "s_n": self.s_n,
            "per_head_atoms": self.per_head_atoms,
            "merge_plan": self.plan.to_json(),
            "num_heads": self.num_heads,
            "head_shared": self.head_shared,
            "train_config": self.train_config,
            "seed": self.seed,
            "num_entries": len(self.entries),
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":")).encode()
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<II", VERSION, len(meta)))
        out.write(meta)
        for key in sorted(self.entries):
            out.write(_KEY.pack(*key))
            out.write(np.asarray(self.entries[key].atoms, dtype="<f4").tobytes(order="F"))
        return out.getvalue()

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OfflineDictionary":
        if data[:4] != MAGIC:
            raise DictionaryFileError(f"expected magic {MAGIC!r}, found {bytes(data[:4])!r}")
        if len(data) < 12:
            raise DictionaryFileError("truncated dictionary header")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise DictionaryFileError(f"dictionary version {version} is not supported")
        pos = 12 + meta_len
        try:
            meta = json.loads(bytes(data[12:pos]).decode("utf-8"))
            kind = Kind(meta["kind"])
            chunk_dim, n = int(meta["chunk_dim"]), int(meta["per_head_atoms"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DictionaryFileError(f"unreadable dictionary metadata: {exc}") from exc
        payload = 4 * chunk_dim * n
        entries = {}
        for _ in range(int(meta["num_entries"])):
            if pos + _KEY.size + payload > len(data):
                raise DictionaryFileError(f"truncated dictionary entry at offset {pos}")
            key = _KEY.unpack_from(data, pos)
            pos += _KEY.size
            atoms = np.frombuffer(data, dtype="<f4", count=chunk_dim * n, offset=pos)
            pos += payload
            entries[key] = Dictionary(atoms.reshape((chunk_dim, n), order="F"), kind=kind,
                                      provenance=Provenance.OFFLINE)
        if pos != len(data):
            raise DictionaryFileError(f"{len(data) - pos} trailing bytes after the last entry")
        return cls(
            kind=kind,
            chunk_dim=chunk_dim,
            s_n=int(meta["s_n"]),
            per_head_atoms=n,
            plan=MergePlan.from_json(meta["merge_plan"]),
            num_heads=int(meta["num_heads"]),
            train_config=meta.get("train_config", {}),
            seed=int(meta.get("seed", 0)),
            head_shared=bool(meta.get("head_shared", False)),
            entries=entries,
        )

    def save(self, path) -> int:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "OfflineDictionary":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def offline_bytes(self, bytes_per_value: int = 2) -> int:
        """Storage of all distinct atoms at ``bytes_per_value`` per entry."""
        heads = 1 if self.head_shared else self.num_heads
        per_lane = self.s_n * self.chunk_dim * self.per_head_atoms
        return len(self.plan.groups) * heads * per_lane * bytes_per_value
