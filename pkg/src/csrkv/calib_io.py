"""Capture files (CSRC) for key/value cache tensors, plus synthetic generators.

A capture holds, for every (layer, head) pair, the cache vectors probed from a
model.  Layout (little-endian)::

    b"CSRC" | u32 version | u32 meta_len | meta (UTF-8 JSON) |
    blocks: (u32 layer, u32 head, u64 count, count*head_dim values)*

Values are row-major and stored as float32 or float16 depending on the header.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np
from scipy.linalg import expm

MAGIC = b"CSRC"
VERSION = 1

_BLOCK_HEAD = struct.Struct("<IIQ")


class Kind(str, Enum):
    KEY = "key"
    VALUE = "value"


class CaptureError(Exception):
    """Base class for capture decoding errors."""


class BadMagic(CaptureError):
    pass


class UnsupportedVersion(CaptureError):
    pass


class Truncated(CaptureError):
    def __init__(self, message: str, block: int | None = None):
        super().__init__(message)
        self.block = block


class IndexOutOfRange(CaptureError):
    pass


class MissingBlock(CaptureError, KeyError):
    pass


class InvalidCapture(CaptureError, ValueError):
    """Raised when a dataset or header violates its invariants."""


@dataclass(frozen=True)
class CaptureHeader:
    model_name: str
    num_layers: int
    num_heads: int
    head_dim: int
    kind: Kind = Kind.KEY
    pre_rope: bool = True
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        for name in ("num_layers", "num_heads", "head_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidCapture(f"{name} must be a positive integer, got {value!r}")
        if self.dtype not in ("f32", "f16"):
            raise InvalidCapture(f"dtype must be 'f32' or 'f16', got {self.dtype!r}")
        if self.kind is Kind.VALUE and self.pre_rope:
            raise InvalidCapture("pre_rope must be false for value captures")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype("<f2") if self.dtype == "f16" else np.dtype("<f4")

    def to_json(self) -> dict:
        return {
            "model_name": self.model_name,
            "num_layers": int(self.num_layers),
            "num_heads": int(self.num_heads),
            "head_dim": int(self.head_dim),
            "kind": self.kind.value,
            "pre_rope": bool(self.pre_rope),
            "dtype": self.dtype,
        }

    @classmethod
    def from_json(cls, meta: dict) -> "CaptureHeader":
        try:
            return cls(
                model_name=str(meta["model_name"]),
                num_layers=int(meta["num_layers"]),
                num_heads=int(meta["num_heads"]),
                head_dim=int(meta["head_dim"]),
                kind=Kind(meta["kind"]),
                pre_rope=bool(meta["pre_rope"]),
                dtype=str(meta["dtype"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidCapture(f"bad capture metadata: {exc}") from exc


@dataclass(frozen=True, eq=False)
class Block:
    layer: int
    head: int
    vectors: np.ndarray

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])


class CaptureDataset:
    """Per-(layer, head) collections of cache vectors.

    Vectors are held as float32.  For ``f16`` headers they are narrowed to
    float16 precision on construction, so the in-memory dataset is exactly
    what a write/read round trip reproduces.
    """

    def __init__(self, header: CaptureHeader, blocks: Iterable[Block] = ()):
        self.header = header
        self._blocks: dict[tuple[int, int], Block] = {}
        for block in blocks:
            self._add(block)

    def _add(self, block: Block) -> None:
        h = self.header
        layer, head = int(block.layer), int(block.head)
        if not (0 <= layer < h.num_layers) or not (0 <= head < h.num_heads):
            raise IndexOutOfRange(
                f"block (layer={layer}, head={head}) outside "
                f"{h.num_layers} layers x {h.num_heads} heads"
            )
        if (layer, head) in self._blocks:
            raise InvalidCapture(f"duplicate block (layer={layer}, head={head})")
        vectors = np.asarray(block.vectors, dtype=np.float64)
        if vectors.ndim == 1 and vectors.size == 0:
            vectors = vectors.reshape(0, h.head_dim)
        if vectors.ndim != 2 or vectors.shape[1] != h.head_dim:
            raise InvalidCapture(
                f"block (layer={layer}, head={head}) has shape {vectors.shape}, "
                f"expected (count, {h.head_dim})"
            )
        if not np.all(np.isfinite(vectors)):
            raise InvalidCapture(f"block (layer={layer}, head={head}) has non-finite values")
        stored = vectors.astype(np.float32).astype(h.np_dtype).astype(np.float32)
        if not np.all(np.isfinite(stored)):
            raise InvalidCapture(
                f"block (layer={layer}, head={head}) overflows {h.dtype}"
            )
        stored.setflags(write=False)
        self._blocks[(layer, head)] = Block(layer, head, stored)

    @property
    def blocks(self) -> list[Block]:
        return list(self._blocks.values())

    def __len__(self) -> int:
        return len(self._blocks)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._blocks

    def block(self, layer: int, head: int) -> Block:
        try:
            return self._blocks[(int(layer), int(head))]
        except KeyError:
            raise MissingBlock(f"no block for (layer={layer}, head={head})") from None

    def layers(self) -> list[int]:
        return sorted({k[0] for k in self._blocks})

    def heads(self) -> list[int]:
        return sorted({k[1] for k in self._blocks})

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaptureDataset):
            return NotImplemented
        if self.header != other.header or list(self._blocks) != list(other._blocks):
            return False
        return all(
            np.array_equal(a.vectors, other._blocks[k].vectors)
            for k, a in self._blocks.items()
        )

    def __repr__(self) -> str:
        return f"CaptureDataset({self.header!r}, blocks={len(self)})"


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------


def capture_to_bytes(dataset: CaptureDataset) -> bytes:
    header = dataset.header
    meta = json.dumps(header.to_json(), sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(meta)))
    out.write(meta)
    for block in dataset.blocks:
        out.write(_BLOCK_HEAD.pack(block.layer, block.head, block.count))
        out.write(np.ascontiguousarray(block.vectors, dtype=header.np_dtype).tobytes())
    return out.getvalue()


def write_capture(dataset: CaptureDataset, destination: Union[BinaryIO, str]) -> int:
    """Serialize ``dataset`` to a binary stream or path; returns bytes written."""
    data = capture_to_bytes(dataset)
    if isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__"):
        with open(destination, "wb") as fh:
            fh.write(data)
    else:
        destination.write(data)
    return len(data)


def _read_exact(buf: memoryview, pos: int, n: int, what: str, block: int | None = None):
    if pos + n > len(buf):
        raise Truncated(f"truncated {what}: need {n} bytes at offset {pos}", block)
    return bytes(buf[pos:pos + n]), pos + n


def capture_from_bytes(data: bytes) -> CaptureDataset:
    buf = memoryview(data)
    magic, pos = _read_exact(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    raw, pos = _read_exact(buf, pos, 8, "header")
    version, meta_len = struct.unpack("<II", raw)
    if version != VERSION:
        raise UnsupportedVersion(f"capture version {version} is not supported (expected {VERSION})")
    meta_raw, pos = _read_exact(buf, pos, meta_len, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidCapture(f"unreadable metadata: {exc}") from exc
    header = CaptureHeader.from_json(meta)
    dtype = header.np_dtype
    row_bytes = header.head_dim * dtype.itemsize
    blocks = []
    index = 0
    while pos < len(buf):
        raw, pos = _read_exact(buf, pos, _BLOCK_HEAD.size, f"block {index} header", index)
        layer, head, count = _BLOCK_HEAD.unpack(raw)
        payload, pos = _read_exact(buf, pos, count * row_bytes, f"block {index} payload", index)
        vectors = np.frombuffer(payload, dtype=dtype).reshape(count, header.head_dim)
        blocks.append(Block(layer, head, vectors))
        index += 1
    return CaptureDataset(header, blocks)


def read_capture(source: Union[BinaryIO, str]) -> CaptureDataset:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return capture_from_bytes(fh.read())
    return capture_from_bytes(source.read())


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedDictionary:
    """Vectors are nonnegative ``sparsity``-sparse mixtures of random unit atoms.

    With ``chunks > 1`` each contiguous channel chunk gets its own atoms and its
    own independent sparse mixture (value-cache style data).
    """

    num_atoms: int
    sparsity: int
    noise_sigma: float = 0.0
    chunks: int = 1


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic clusters; centres are drawn per head and shared by all layers."""

    num_components: int
    spread: float


@dataclass(frozen=True)
class LayerDrift:
    """A clustered base distribution, rotated by ``drift_rate * layer`` per layer.

    Layers listed in ``breaks`` start a new base distribution (fresh cluster
    centres), planting a discontinuity for layer merging to find.
    """

    drift_rate: float
    num_components: int = 4
    spread: float = 0.02
    breaks: tuple[int, ...] = ()


Generator = Union[PlantedDictionary, GaussianMixture, LayerDrift]

# radians of rotation per layer at drift_rate = 1
DRIFT_ANGLE = math.pi / 8


@dataclass(frozen=True)
class SyntheticSpec:
    num_layers: int
    num_heads: int
    head_dim: int
    tokens_per_layer: int
    generator: Generator
    seed: int = 0
    kind: Kind = Kind.KEY
    dtype: str = "f32"
    model_name: str = "synthetic"

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "tokens_per_layer"):
            if int(getattr(self, name)) < 1:
                raise InvalidCapture(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidCapture(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        g = self.generator
        if isinstance(g, PlantedDictionary):
            if g.num_atoms < 1 or g.sparsity < 1 or g.chunks < 1:
                raise InvalidCapture("num_atoms, sparsity and chunks must be positive")
            if g.sparsity > g.num_atoms:
                raise InvalidCapture("sparsity cannot exceed num_atoms")
            if g.noise_sigma < 0:
                raise InvalidCapture("noise_sigma must be >= 0")
            if self.head_dim % g.chunks:
                raise InvalidCapture("head_dim must be divisible by chunks")
        elif isinstance(g, GaussianMixture):
            if g.num_components < 1:
                raise InvalidCapture("num_components must be positive")
            if g.spread < 0:
                raise InvalidCapture("spread must be >= 0")
        elif isinstance(g, LayerDrift):
            if not 0.0 <= g.drift_rate <= 1.0:
                raise InvalidCapture("drift_rate must lie in [0, 1]")
            if g.num_components < 1 or g.spread < 0:
                raise InvalidCapture("num_components must be positive and spread >= 0")
        else:
            raise InvalidCapture(f"unknown generator {g!r}")


def _unit_columns(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    atoms = rng.standard_normal((dim, count))
    return atoms / np.linalg.norm(atoms, axis=0, keepdims=True)


def _planted_block(rng, g: PlantedDictionary, head_dim: int, n: int) -> np.ndarray:
    chunk_dim = head_dim // g.chunks
    parts = []
    for _ in range(g.chunks):
        atoms = _unit_columns(rng, chunk_dim, g.num_atoms)
        # one random subset per row: argsort of uniform keys
        picks = np.argsort(rng.random((n, g.num_atoms)), axis=1)[:, : g.sparsity]
        coefs = rng.uniform(0.5, 1.5, size=(n, g.sparsity))
        parts.append(np.einsum("nk,dnk->nd", coefs, atoms[:, picks]))
    x = np.concatenate(parts, axis=1)
    if g.noise_sigma > 0:
        x = x + g.noise_sigma * rng.standard_normal(x.shape)
    return x


def _cluster_sample(rng, centres: np.ndarray, spread: float, n: int) -> np.ndarray:
    labels = rng.integers(0, centres.shape[0], size=n)
    return centres[labels] + spread * rng.standard_normal((n, centres.shape[1]))


def generate_synthetic(spec: SyntheticSpec) -> CaptureDataset:
    """Deterministically synthesize a capture dataset from ``spec``."""
    spec.validate()
    header = CaptureHeader(
        model_name=spec.model_name,
        num_layers=spec.num_layers,
        num_heads=spec.num_heads,
        head_dim=spec.head_dim,
        kind=spec.kind,
        pre_rope=spec.kind is Kind.KEY,
        dtype=spec.dtype,
    )
    g = spec.generator
    root = np.random.SeedSequence(int(spec.seed))
    head_seeds = root.spawn(spec.num_heads)
    blocks = []

    if isinstance(g, PlantedDictionary):
        for layer in range(spec.num_layers):
            for head in range(spec.num_heads):
                rng = np.random.default_rng([int(spec.seed), layer, head])
                blocks.append(Block(layer, head, _planted_block(rng, g, spec.head_dim, spec.tokens_per_layer)))

    elif isinstance(g, GaussianMixture):
        centres = [
            np.random.default_rng(s).standard_normal((g.num_components, spec.head_dim))
            for s in head_seeds
        ]
        for layer in range(spec.num_layers):
            for head in range(spec.num_heads):
                rng = np.random.default_rng([int(spec.seed), layer, head, 1])
                blocks.append(Block(layer, head, _cluster_sample(rng, centres[head], g.spread, spec.tokens_per_layer)))

    else:
        d = spec.head_dim
        gen_rng = np.random.default_rng(head_seeds[0].spawn(1)[0])
        skew = gen_rng.standard_normal((d, d))
        skew = skew - skew.T
        # unit spectral radius so DRIFT_ANGLE is the largest rotation angle per layer
        skew /= np.max(np.abs(np.linalg.eigvals(skew)))
        segment = 0
        seg_centres = {}
        for layer in range(spec.num_layers):
            if layer in g.breaks:
                segment += 1
            if segment not in seg_centres:
                seg_rng = np.random.default_rng([int(spec.seed), 7919, segment])
                seg_centres[segment] = [
                    _unit_columns(seg_rng, d, g.num_components).T for _ in range(spec.num_heads)
                ]
            rot = expm(skew * (g.drift_rate * DRIFT_ANGLE * layer))
            for head in range(spec.num_heads):
                rng = np.random.default_rng([int(spec.seed), layer, head, 2])
                x = _cluster_sample(rng, seg_centres[segment][head], g.spread, spec.tokens_per_layer)
                blocks.append(Block(layer, head, x @ rot.T))

    return CaptureDataset(header, blocks)


def sample_vectors(
    dataset: CaptureDataset,
    layer_set: Sequence[int],
    head: int,
    max_count: int,
    seed: int = 0,
) -> np.ndarray:
    """Concatenate the blocks of ``layer_set`` (ascending) for one head.

    When the total exceeds ``max_count`` a uniform sample without replacement
    is taken; the kept rows stay in their concatenated order.
    """
    if max_count < 1:
        raise ValueError("max_count must be positive")
    parts = [dataset.block(layer, head).vectors for layer in sorted(set(layer_set))]
    x = np.concatenate(parts, axis=0) if parts else np.zeros((0, dataset.header.head_dim), np.float32)
    if x.shape[0] <= max_count:
        return x
    rng = np.random.default_rng([int(seed), int(head)])
    keep = np.sort(rng.choice(x.shape[0], size=max_count, replace=False))
    return x[keep]


__all__ = [
    "MAGIC", "VERSION", "Kind", "CaptureHeader", "Block", "CaptureDataset",
    "CaptureError", "BadMagic", "UnsupportedVersion", "Truncated", "IndexOutOfRange",
    "InvalidCapture", "MissingBlock", "PlantedDictionary", "GaussianMixture", "LayerDrift",
    "SyntheticSpec", "capture_to_bytes", "capture_from_bytes", "write_capture",
    "read_capture", "generate_synthetic", "sample_vectors",
]
