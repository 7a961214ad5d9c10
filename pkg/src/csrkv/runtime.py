"""Inference-side compressed cache.

Each (layer, head) lane gets a prompt dictionary per chunk: the offline atoms
of the layer's merge group followed by online atoms sampled from the prompt
itself (each sampled vector contributes its normalised copy and its
negation).  Tokens are MP-encoded against it; poorly fitting tokens escape to a
raw outlier table.  Stored coefficients and raw outliers are kept at float16
precision, exactly what the snapshot serializes.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calib_io import Kind
from .codec import (
    MAX_ATOMS,
    CodecConfig,
    CodecError,
    Dictionary,
    Provenance,
    SparseCode,
    code_nbytes,
    desparse_batch,
    encode_batch,
    encode_vector,
    equivalent_bits,
    read_code,
    write_code,
)
from .offline import OfflineDictionary

SNAPSHOT_MAGIC = b"CSRS"
SNAPSHOT_VERSION = 1
FP16_BYTES = 2
ENTRY_BYTES = 4


class IndexSpaceOverflow(ValueError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PromptDictionary:
    """Per-chunk composite dictionaries for one (layer, head) lane.

    ``online_vectors`` are the sampled prompt vectors the online atoms were
    derived from; they are what gets stored.
    """

    chunks: tuple
    offline_count: int
    online_vectors: np.ndarray
    online_size: int

    @property
    def online_count(self) -> int:
        return self.chunks[0].num_atoms - self.offline_count

    @property
    def num_atoms(self) -> int:
        return self.chunks[0].num_atoms


def _online_atoms(vectors: np.ndarray, c: int, chunk_dim: int, online_size: int) -> np.ndarray:
    part = np.asarray(vectors, dtype=np.float64)[:, c * chunk_dim:(c + 1) * chunk_dim]
    norms = np.linalg.norm(part, axis=1)
    part = part[norms > 0] / norms[norms > 0, None]
    pairs = np.empty((2 * part.shape[0], chunk_dim))
    pairs[0::2] = part
    pairs[1::2] = -part
    return pairs[:online_size].T


def assemble_prompt_dictionary(
    offline: Optional[Sequence[Dictionary]],
    online_vectors: np.ndarray,
    online_size: int,
    cfg: CodecConfig,
    kind: Kind = Kind.KEY,
) -> PromptDictionary:
    """Deterministically rebuild the composite dictionaries from stored parts."""
    cd = cfg.chunk_dim
    offline = list(offline) if offline else []
    if offline and len(offline) != cfg.s_n:
        raise CodecError(f"expected {cfg.s_n} offline chunk dictionaries, got {len(offline)}")
    offline_count = offline[0].num_atoms if offline else 0
    online_vectors = np.asarray(online_vectors, dtype=np.float32).reshape(-1, cfg.head_dim)
    chunks = []
    for c in range(cfg.s_n):
        parts = []
        if offline:
            parts.append(offline[c])
        online = _online_atoms(online_vectors, c, cd, online_size)
        if online.shape[1]:
            parts.append(Dictionary(online, kind=kind, provenance=Provenance.ONLINE))
        if not parts:
            raise CodecError("prompt dictionary has no atoms: no offline part and no usable online samples")
        total = sum(p.num_atoms for p in parts)
        if total + 1 > MAX_ATOMS + 1:
            raise IndexSpaceOverflow(
                f"{total} atoms plus the outlier sentinel exceed the 16-bit index space "
                f"(limit {MAX_ATOMS} atoms)"
            )
        chunks.append(Dictionary.composite(parts, kind=kind) if len(parts) > 1 else parts[0])
    counts = {d.num_atoms for d in chunks}
    if len(counts) != 1:
        # a zero chunk in a sampled vector would misalign chunk index spaces
        raise CodecError("online sampling produced different atom counts per chunk")
    return PromptDictionary(tuple(chunks), offline_count, online_vectors, online_size)


def build_prompt_dictionary(
    offline: Optional[Sequence[Dictionary]],
    prefill_vectors,
    online_size: int,
    cfg: CodecConfig,
    seed: int = 0,
    kind: Kind = Kind.KEY,
) -> PromptDictionary:
    """Offline slice plus ``online_size`` atoms sampled from the prefill vectors.

    ``ceil(online_size / 2)`` prompt vectors are drawn uniformly without
    replacement; each adds its normalised chunk and the negation of it.
    Vectors with any all-zero chunk are never sampled.
    """
    X = np.asarray(prefill_vectors, dtype=np.float32).reshape(-1, cfg.head_dim)
    if online_size < 0:
        raise ValueError("online_size must be >= 0")
    if online_size > 0 and X.shape[0] == 0:
        raise ValueError("an online part needs prefill vectors")
    offline_count = offline[0].num_atoms if offline else 0
    if offline_count + online_size + 1 > MAX_ATOMS + 1:
        raise IndexSpaceOverflow(
            f"{offline_count} offline + {online_size} online atoms plus the outlier sentinel "
            f"exceed the 16-bit index space (limit {MAX_ATOMS} atoms)"
        )
    chunked = X.reshape(X.shape[0], cfg.s_n, cfg.chunk_dim)
    usable = np.flatnonzero(np.all(np.any(chunked != 0, axis=2), axis=1))
    want = min(math.ceil(online_size / 2), usable.size)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(usable, size=want, replace=False)) if want else np.zeros(0, np.intp)
    return assemble_prompt_dictionary(offline, X[picks], online_size, cfg, kind)


@dataclass(frozen=True)
class MemoryReport:
    bytes_codes: int
    bytes_online_dict: int
    bytes_offline_dict_amortized: float
    bytes_outliers: int
    bytes_dense_equivalent: int
    equivalent_bits_per_channel: float
    compression_ratio: float

    def to_json(self) -> dict:
        return {"schema_version": 1, **self.__dict__}


@dataclass
class _Lane:
    dictionary: PromptDictionary
    codes: list = field(default_factory=list)
    outliers: dict = field(default_factory=dict)


class CsrCache:
    """Compressed cache for one sequence, addressed by (layer, head) lanes."""

    def __init__(
        self,
        cfg: CodecConfig,
        offline: Optional[OfflineDictionary] = None,
        online_size: int = 0,
        seed: int = 0,
        kind: Kind | None = None,
    ):
        if offline is not None:
            if offline.s_n != cfg.s_n or offline.head_dim != cfg.head_dim:
                raise CodecError(
                    f"offline dictionary is (head_dim={offline.head_dim}, s_n={offline.s_n}); "
                    f"codec wants (head_dim={cfg.head_dim}, s_n={cfg.s_n})"
                )
        self.cfg = cfg
        self.offline = offline
        self.online_size = online_size
        self.seed = seed
        self.kind = Kind(kind) if kind is not None else (offline.kind if offline else Kind.KEY)
        self._lanes: dict[tuple[int, int], _Lane] = {}

    def lanes(self) -> list[tuple[int, int]]:
        return sorted(self._lanes)

    def dictionary(self, layer: int, head: int) -> PromptDictionary:
        return self._lane(layer, head).dictionary

    def _lane(self, layer: int, head: int) -> _Lane:
        try:
            return self._lanes[(layer, head)]
        except KeyError:
            raise KeyError(f"no prompt dictionary for (layer={layer}, head={head})") from None

    def _offline_slices(self, layer, head):
        return self.offline.slices(layer, head) if self.offline is not None else None

    def build_prompt_dictionary(self, layer: int, head: int, prefill_vectors) -> PromptDictionary:
        pd = build_prompt_dictionary(
            self._offline_slices(layer, head),
            prefill_vectors,
            self.online_size,
            self.cfg,
            seed=int(np.random.SeedSequence([self.seed, layer, head]).generate_state(1)[0]),
            kind=self.kind,
        )
        self._lanes[(layer, head)] = _Lane(pd)
        return pd

    def _store(self, lane: _Lane, code: SparseCode) -> None:
        code = code.narrowed()
        if code.is_outlier:
            lane.outliers[len(lane.codes)] = code.raw
        lane.codes.append(code)

    def prefill_compress(self, layer: int, head: int, X_prompt) -> None:
        """Encode the prompt's vectors; builds the lane's dictionary first if needed."""
        X = np.asarray(X_prompt, dtype=np.float32).reshape(-1, self.cfg.head_dim)
        if (layer, head) not in self._lanes:
            self.build_prompt_dictionary(layer, head, X)
        lane = self._lanes[(layer, head)]
        for code in encode_batch(X, list(lane.dictionary.chunks), self.cfg):
            self._store(lane, code)

    def append_token(self, layer: int, head: int, x) -> None:
        lane = self._lane(layer, head)
        x = np.asarray(x, dtype=np.float32)
        self._store(lane, encode_vector(x, list(lane.dictionary.chunks), self.cfg))

    def num_tokens(self, layer: int, head: int) -> int:
        return len(self._lane(layer, head).codes)

    def codes(self, layer: int, head: int) -> list[SparseCode]:
        return list(self._lane(layer, head).codes)

    def outliers(self, layer: int, head: int) -> dict:
        return dict(self._lane(layer, head).outliers)

    def decode_range(self, layer: int, head: int, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        lane = self._lane(layer, head)
        stop = len(lane.codes) if stop is None else stop
        if not 0 <= start <= stop <= len(lane.codes):
            raise IndexError(f"range [{start}, {stop}) outside 0..{len(lane.codes)}")
        return desparse_batch(lane.codes[start:stop], list(lane.dictionary.chunks), self.cfg)

    def memory_report(self, amortize_over: int = 1) -> MemoryReport:
        cfg = self.cfg
        codes = online = outliers = tokens = n_outliers = 0
        groups_heads = set()
        for (layer, head), lane in self._lanes.items():
            tokens += len(lane.codes)
            n_outliers += len(lane.outliers)
            codes += sum(ENTRY_BYTES * c.num_entries for c in lane.codes if not c.is_outlier)
            outliers += FP16_BYTES * cfg.head_dim * len(lane.outliers)
            online += FP16_BYTES * lane.dictionary.online_vectors.size
            if self.offline is not None:
                groups_heads.add((self.offline.plan.group_of(layer), head))
        offline = 0.0
        if self.offline is not None:
            per_lane = FP16_BYTES * self.offline.per_head_atoms * cfg.head_dim
            offline = per_lane * len(groups_heads) / max(amortize_over, 1)
        dense = FP16_BYTES * cfg.head_dim * tokens
        stored = codes + online + outliers
        if n_outliers == 0:
            bits = equivalent_bits(cfg) if tokens else 0.0
        else:
            bits = 8.0 * (codes + outliers) / (cfg.head_dim * tokens)
        return MemoryReport(
            bytes_codes=codes,
            bytes_online_dict=online,
            bytes_offline_dict_amortized=offline,
            bytes_outliers=outliers,
            bytes_dense_equivalent=dense,
            equivalent_bits_per_channel=bits,
            compression_ratio=dense / stored if stored else 0.0,
        )

    # -- snapshot -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Snapshot: dictionary hash, codec config, then per lane online vectors and codes.

        Layout: ``b"CSRS" | u32 version | u32 meta_len | meta JSON | lanes``,
        where each lane is ``u32 layer, u32 head, u32 n_online, u64 n_codes,
        n_online*head_dim f32, codes`` (codes in the SparseCode wire format).
        """
        meta = {
            "csrd_sha256": self.offline.sha256() if self.offline is not None else None,
            "codec": self.cfg.to_json(),
            "online_size": self.online_size,
            "seed": self.seed,
            "kind": self.kind.value,
            "num_lanes": len(self._lanes),
        }
        raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        out = io.BytesIO()
        out.write(SNAPSHOT_MAGIC)
        out.write(struct.pack("<II", SNAPSHOT_VERSION, len(raw)))
        out.write(raw)
        for (layer, head) in self.lanes():
            lane = self._lanes[(layer, head)]
            vecs = lane.dictionary.online_vectors
            out.write(struct.pack("<IIIQ", layer, head, vecs.shape[0], len(lane.codes)))
            out.write(np.asarray(vecs, dtype="<f4").tobytes())
            for code in lane.codes:
                write_code(out, code, self.cfg)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, offline: Optional[OfflineDictionary] = None) -> "CsrCache":
        if data[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError(f"expected magic {SNAPSHOT_MAGIC!r}, found {bytes(data[:4])!r}")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"snapshot version {version} is not supported")
        pos = 12 + meta_len
        meta = json.loads(bytes(data[12:pos]).decode("utf-8"))
        want = meta.get("csrd_sha256")
        if want is not None:
            if offline is None:
                raise SnapshotError("snapshot references an offline dictionary; pass it in")
            if offline.sha256() != want:
                raise SnapshotError("offline dictionary hash does not match the snapshot")
        cfg = CodecConfig.from_json(meta["codec"])
        cache = cls(cfg, offline if want else None, int(meta["online_size"]), int(meta["seed"]),
                    kind=meta["kind"])
        buf = memoryview(data)
        lane_head = struct.Struct("<IIIQ")
        for _ in range(int(meta["num_lanes"])):
            if pos + lane_head.size > len(buf):
                raise SnapshotError("truncated snapshot lane header")
            layer, head, n_online, n_codes = lane_head.unpack_from(buf, pos)
            pos += lane_head.size
            nbytes = 4 * n_online * cfg.head_dim
            if pos + nbytes > len(buf):
                raise SnapshotError("truncated online vectors")
            vecs = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").reshape(n_online, cfg.head_dim)
            pos += nbytes
            pd = assemble_prompt_dictionary(
                cache._offline_slices(layer, head), vecs.copy(), cache.online_size, cfg, cache.kind
            )
            lane = _Lane(pd)
            for t in range(n_codes):
                code, pos = read_code(buf, pos, cfg)
                if code.is_outlier:
                    lane.outliers[t] = code.raw
                lane.codes.append(code)
            cache._lanes[(layer, head)] = lane
        if pos != len(buf):
            raise SnapshotError(f"{len(buf) - pos} trailing bytes in snapshot")
        return cache

    def save(self, path) -> int:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def load(cls, path, offline: Optional[OfflineDictionary] = None) -> "CsrCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), offline)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def code_bytes(codes: Sequence[SparseCode], cfg: CodecConfig) -> int:
    """Exact wire size of ``codes`` including flag and count bytes."""
    return sum(code_nbytes(c, cfg) for c in codes)
