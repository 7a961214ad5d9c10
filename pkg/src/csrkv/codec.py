"""Matching Pursuit encoding/decoding of cache vectors against unit-norm dictionaries."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .calib_io import Kind

# Indices are stored as u16; the top value marks an outlier and never names an atom.
OUTLIER_SENTINEL = 65535
MAX_ATOMS = 65535
NORM_TOL = 1e-5
EPS = 1e-12
# A correlation this small relative to the residual norm is rounding noise: treat it as 0.
CORR_TOL = 1e-12


class CodecError(ValueError):
    pass


class Provenance(str, Enum):
    OFFLINE = "offline"
    ONLINE = "online"
    OUTLIER = "outlier"
    COMPOSITE = "composite"


@dataclass(frozen=True, eq=False)
class Dictionary:
    """A ``chunk_dim x num_atoms`` matrix whose columns are unit-norm atoms.

    ``segments`` records ``(provenance, start, stop)`` column ranges for
    composite dictionaries.
    """

    atoms: np.ndarray
    kind: Kind = Kind.KEY
    provenance: Provenance = Provenance.OFFLINE
    segments: tuple = ()
    _atoms64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float32, order="F")
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise CodecError(f"atoms must be a non-empty 2-D matrix, got shape {atoms.shape}")
        if atoms.shape[1] > MAX_ATOMS:
            raise CodecError(f"{atoms.shape[1]} atoms exceed the 16-bit index space ({MAX_ATOMS})")
        if not np.all(np.isfinite(atoms)):
            raise CodecError("atoms must be finite")
        norms = np.linalg.norm(atoms.astype(np.float64), axis=0)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise CodecError(f"atom {bad[0]} has norm {norms[bad[0]]:.8f}, expected 1")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        a64 = atoms.astype(np.float64)
        a64.setflags(write=False)
        object.__setattr__(self, "_atoms64", a64)

    @property
    def chunk_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def num_atoms(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def from_unnormalized(cls, atoms, **kwargs) -> "Dictionary":
        atoms = np.asarray(atoms, dtype=np.float64)
        return cls(atoms / np.linalg.norm(atoms, axis=0, keepdims=True), **kwargs)

    @classmethod
    def composite(cls, parts: Sequence["Dictionary"], kind: Kind | None = None) -> "Dictionary":
        """Stack dictionaries column-wise, remembering where each came from."""
        segments, start = [], 0
        for part in parts:
            segments.append((part.provenance.value, start, start + part.num_atoms))
            start += part.num_atoms
        return cls(
            np.concatenate([p.atoms for p in parts], axis=1),
            kind=kind if kind is not None else parts[0].kind,
            provenance=Provenance.COMPOSITE,
            segments=tuple(segments),
        )

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.provenance == other.provenance
            and self.segments == other.segments
            and np.array_equal(self.atoms, other.atoms)
        )


@dataclass(frozen=True)
class CodecConfig:
    s: int
    s_n: int
    head_dim: int
    outlier_threshold: Optional[float] = None

    def __post_init__(self):
        if self.s < 1 or self.s > 255:
            raise CodecError(f"s must be in [1, 255], got {self.s}")
        if self.s_n < 1 or self.head_dim < 1:
            raise CodecError("s_n and head_dim must be positive")
        if self.head_dim % self.s_n:
            raise CodecError(f"head_dim {self.head_dim} is not divisible by s_n {self.s_n}")
        if self.outlier_threshold is not None and not 0.0 <= self.outlier_threshold <= 1.0:
            raise CodecError("outlier_threshold must lie in [0, 1] or be None")

    @property
    def chunk_dim(self) -> int:
        return self.head_dim // self.s_n

    def to_json(self) -> dict:
        return {
            "s": self.s,
            "s_n": self.s_n,
            "head_dim": self.head_dim,
            "outlier_threshold": self.outlier_threshold,
        }

    @classmethod
    def from_json(cls, meta: dict) -> "CodecConfig":
        return cls(int(meta["s"]), int(meta["s_n"]), int(meta["head_dim"]), meta.get("outlier_threshold"))


@dataclass(frozen=True, eq=False)
class SparseCode:
    """Sparse code of one head vector.

    ``indices``/``coefficients`` hold the entries of all chunks back to back;
    ``counts[c]`` is how many belong to chunk ``c``.  Within a chunk entries are
    in order of first selection.
    """

    indices: np.ndarray
    coefficients: np.ndarray
    counts: tuple
    is_outlier: bool = False
    raw: Optional[np.ndarray] = None

    @classmethod
    def outlier(cls, raw: np.ndarray, s_n: int) -> "SparseCode":
        return cls(
            np.zeros(0, np.uint16), np.zeros(0, np.float32), (0,) * s_n,
            True, np.asarray(raw, dtype=np.float32).copy(),
        )

    @property
    def num_entries(self) -> int:
        return int(self.indices.size)

    def chunk(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        start = sum(self.counts[:c])
        stop = start + self.counts[c]
        return self.indices[start:stop], self.coefficients[start:stop]

    def narrowed(self) -> "SparseCode":
        """Round coefficients (or raw values) to float16 precision, as serialized."""
        if self.is_outlier:
            return SparseCode(
                self.indices, self.coefficients, self.counts, True,
                self.raw.astype(np.float16).astype(np.float32),
            )
        return SparseCode(
            self.indices, self.coefficients.astype(np.float16).astype(np.float32), self.counts
        )

    def __eq__(self, other):
        if not isinstance(other, SparseCode):
            return NotImplemented
        if self.is_outlier != other.is_outlier or self.counts != other.counts:
            return False
        if self.is_outlier:
            return np.array_equal(self.raw, other.raw)
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.coefficients, other.coefficients
        )

    def __repr__(self):
        if self.is_outlier:
            return f"SparseCode(outlier, raw={self.raw!r})"
        pairs = [(int(i), float(c)) for i, c in zip(self.indices, self.coefficients)]
        return f"SparseCode(counts={self.counts}, entries={pairs})"


class MPTrace(NamedTuple):
    indices: list
    coefficients: list
    residual_norms: list
    residual: np.ndarray


def _check_vector(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise CodecError(f"expected a vector of length {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise CodecError("input vector is not finite")
    return x


def matching_pursuit(x, dictionary: Dictionary, s: int) -> MPTrace:
    """Run ``s`` MP iterations and keep the per-iteration selections.

    Coefficients are signed inner products; ties go to the lowest atom index.
    Stops early once the residual is zero or orthogonal to every atom, where a
    correlation below ``CORR_TOL * ||r||`` counts as orthogonal.
    """
    atoms = dictionary._atoms64
    r = _check_vector(x, atoms.shape[0]).copy()
    idx, coef, norms = [], [], [float(np.linalg.norm(r))]
    for _ in range(s):
        if not r.any():
            break
        corr = atoms.T @ r
        i = int(np.argmax(np.abs(corr)))
        c = corr[i]
        if abs(c) <= CORR_TOL * np.linalg.norm(r):
            break
        r -= c * atoms[:, i]
        idx.append(i)
        coef.append(float(c))
        norms.append(float(np.linalg.norm(r)))
    return MPTrace(idx, coef, norms, r)


def mp_encode_chunk(x, dictionary: Dictionary, s: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Encode one chunk; returns ``(indices, coefficients, residual_norm)``.

    Re-selected atoms accumulate into a single entry, so at most ``s``
    distinct indices come back.
    """
    if s < 1:
        raise CodecError("s must be positive")
    trace = matching_pursuit(x, dictionary, s)
    acc: dict[int, float] = {}
    for i, c in zip(trace.indices, trace.coefficients):
        acc[i] = acc.get(i, 0.0) + c
    indices = np.fromiter(acc.keys(), dtype=np.uint16, count=len(acc))
    coefs = np.fromiter(acc.values(), dtype=np.float64, count=len(acc)).astype(np.float32)
    return indices, coefs, trace.residual_norms[-1]


DictArg = Union[Dictionary, Sequence[Dictionary]]


def chunk_dictionaries(dicts: DictArg, cfg: CodecConfig) -> list[Dictionary]:
    if isinstance(dicts, Dictionary):
        dicts = [dicts] * cfg.s_n
    dicts = list(dicts)
    if len(dicts) != cfg.s_n:
        raise CodecError(f"expected {cfg.s_n} chunk dictionaries, got {len(dicts)}")
    for c, d in enumerate(dicts):
        if d.chunk_dim != cfg.chunk_dim:
            raise CodecError(f"chunk {c} dictionary has dim {d.chunk_dim}, expected {cfg.chunk_dim}")
    return dicts


def _encode(x: np.ndarray, dicts: list[Dictionary], cfg: CodecConfig) -> SparseCode:
    cd = cfg.chunk_dim
    all_idx, all_coef, counts = [], [], []
    sq_residual = 0.0
    for c, d in enumerate(dicts):
        idx, coef, rn = mp_encode_chunk(x[c * cd:(c + 1) * cd], d, cfg.s)
        all_idx.append(idx)
        all_coef.append(coef)
        counts.append(idx.size)
        sq_residual += rn * rn
    if cfg.outlier_threshold is not None:
        rel = np.sqrt(sq_residual) / max(float(np.linalg.norm(x)), EPS)
        if rel > cfg.outlier_threshold:
            return SparseCode.outlier(x, cfg.s_n)
    return SparseCode(np.concatenate(all_idx), np.concatenate(all_coef), tuple(counts))


def encode_vector(x, dicts: DictArg, cfg: CodecConfig) -> SparseCode:
    """Chunk ``x`` into ``s_n`` pieces and MP-encode each against its dictionary."""
    x = _check_vector(x, cfg.head_dim)
    return _encode(x, chunk_dictionaries(dicts, cfg), cfg)


def encode_batch(X, dicts: DictArg, cfg: CodecConfig) -> list[SparseCode]:
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return []
    if X.ndim != 2 or X.shape[1] != cfg.head_dim:
        raise CodecError(f"expected (count, {cfg.head_dim}) matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise CodecError("input matrix is not finite")
    dicts = chunk_dictionaries(dicts, cfg)
    return [_encode(x, dicts, cfg) for x in X]


def desparse(code: SparseCode, dicts: DictArg, cfg: CodecConfig) -> np.ndarray:
    """Reconstruct the dense vector ``D r`` chunk by chunk (raw for outliers)."""
    if code.is_outlier:
        return code.raw.astype(np.float32, copy=True)
    dicts = chunk_dictionaries(dicts, cfg)
    cd = cfg.chunk_dim
    out = np.zeros(cfg.head_dim, dtype=np.float64)
    for c, d in enumerate(dicts):
        idx, coef = code.chunk(c)
        if idx.size and int(idx.max()) >= d.num_atoms:
            raise CodecError(f"index {int(idx.max())} out of range for {d.num_atoms} atoms")
        out[c * cd:(c + 1) * cd] = d._atoms64[:, idx.astype(np.intp)] @ coef.astype(np.float64)
    return out.astype(np.float32)


def desparse_batch(codes: Sequence[SparseCode], dicts: DictArg, cfg: CodecConfig) -> np.ndarray:
    dicts = chunk_dictionaries(dicts, cfg)
    out = np.zeros((len(codes), cfg.head_dim), dtype=np.float32)
    for t, code in enumerate(codes):
        out[t] = desparse(code, dicts, cfg)
    return out


def equivalent_bits(cfg: CodecConfig) -> float:
    """Bits per channel that CSR(s, s_n) storage corresponds to: 32 s s_n / d_h."""
    return 32.0 * cfg.s * cfg.s_n / cfg.head_dim


def mp_batch(X: np.ndarray, atoms: np.ndarray, s: int):
    """Vectorised MP over the rows of ``X`` (training path, float64).

    Returns ``(indices, coefficients, residual)``; ``indices`` is ``(n, s)``
    with ``-1`` where a row stopped early (coefficient 0 there).
    """
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(atoms, dtype=np.float64)
    n = X.shape[0]
    R = X.copy()
    idx = np.full((n, s), -1, dtype=np.int64)
    coef = np.zeros((n, s), dtype=np.float64)
    rows = np.arange(n)
    for g in range(s):
        corr = R @ W
        best = np.argmax(np.abs(corr), axis=1)
        c = corr[rows, best]
        live = np.abs(c) > CORR_TOL * np.linalg.norm(R, axis=1)
        c = np.where(live, c, 0.0)
        R -= c[:, None] * W[:, best].T
        idx[live, g] = best[live]
        coef[:, g] = c
    return idx, coef, R


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

_U8 = struct.Struct("<B")
_PAIR = np.dtype([("index", "<u2"), ("coef", "<f2")])


def code_nbytes(code: SparseCode, cfg: CodecConfig) -> int:
    if code.is_outlier:
        return 1 + 2 * cfg.head_dim
    return 1 + cfg.s_n + 4 * code.num_entries


def write_code(out, code: SparseCode, cfg: CodecConfig) -> None:
    if code.is_outlier:
        out.write(_U8.pack(1))
        out.write(np.asarray(code.raw, dtype="<f2").tobytes())
        return
    out.write(_U8.pack(0))
    for c in range(cfg.s_n):
        idx, coef = code.chunk(c)
        out.write(_U8.pack(idx.size))
        pairs = np.empty(idx.size, dtype=_PAIR)
        pairs["index"] = idx
        pairs["coef"] = coef
        out.write(pairs.tobytes())


def read_code(buf: memoryview, pos: int, cfg: CodecConfig) -> tuple[SparseCode, int]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CodecError(f"truncated sparse code at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    flags = take(1)[0]
    if flags & 1:
        raw = np.frombuffer(take(2 * cfg.head_dim), dtype="<f2").astype(np.float32)
        return SparseCode.outlier(raw, cfg.s_n), pos
    idx_parts, coef_parts, counts = [], [], []
    for _ in range(cfg.s_n):
        k = take(1)[0]
        pairs = np.frombuffer(take(4 * k), dtype=_PAIR)
        idx_parts.append(pairs["index"].astype(np.uint16))
        coef_parts.append(pairs["coef"].astype(np.float32))
        counts.append(k)
    return SparseCode(np.concatenate(idx_parts), np.concatenate(coef_parts), tuple(counts)), pos


def serialize_codes(codes: Sequence[SparseCode], cfg: CodecConfig) -> bytes:
    out = io.BytesIO()
    for code in codes:
        write_code(out, code, cfg)
    return out.getvalue()


def deserialize_codes(data: bytes, cfg: CodecConfig, count: int | None = None) -> list[SparseCode]:
    buf = memoryview(data)
    pos, codes = 0, []
    while pos < len(buf) and (count is None or len(codes) < count):
        code, pos = read_code(buf, pos, cfg)
        codes.append(code)
    if count is not None and len(codes) != count:
        raise CodecError(f"expected {count} codes, decoded {len(codes)}")
    return codes
