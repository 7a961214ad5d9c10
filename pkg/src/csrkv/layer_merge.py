"""Layer similarity via 2-D histograms of PCA-projected cache vectors, and merge plans.

Two layers are compared by normalising their vectors, fitting a 2-component
PCA on the pair, binning both projections on a shared 200 x 200 grid and
taking the base-2 Jensen-Shannon divergence of the two histograms.  Merge plans
group contiguous layers whose pairwise divergences stay below ``delta1`` and
whose chained adjacent divergences sum to at most ``delta2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .calib_io import CaptureDataset, Kind

BINS = 200
DEFAULT_DELTA1 = 0.20
DEFAULT_DELTA2 = 1.0


class DegenerateCovariance(ValueError):
    pass


class InvalidMergePlan(ValueError):
    pass


def normalize_rows(X) -> tuple[np.ndarray, int]:
    """Scale rows to unit l2 norm; zero rows are dropped and counted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    keep = norms > 0
    return X[keep] / norms[keep, None], int(np.count_nonzero(~keep))


@dataclass(frozen=True, eq=False)
class PCA2:
    mean: np.ndarray
    directions: np.ndarray  # (d, 2), orthonormal columns
    eigenvalues: np.ndarray  # descending

    def project(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.directions


def pca2_fit(X) -> PCA2:
    """Top-2 principal directions of ``X`` from a symmetric eigendecomposition.

    Each direction's sign is chosen so that its largest-magnitude entry is
    positive, which makes the fit deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("PCA needs at least 3 rows")
    if X.shape[1] < 2:
        raise ValueError("PCA to 2 dimensions needs at least 2 columns")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    scale = max(float(np.abs(X).max()), 1.0)
    if vals[-1] <= 1e-14 * scale * scale:
        raise DegenerateCovariance("covariance is rank 0: all rows are identical")
    order = np.argsort(vals)[::-1][:2]
    vals, vecs = vals[order], vecs[:, order].copy()
    for j in range(2):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    return PCA2(mean, vecs, np.maximum(vals, 0.0))


def shared_bounds(*point_sets: np.ndarray, margin: float = 0.01) -> tuple[float, float, float, float]:
    """Bounding box of all point sets, widened by ``margin`` of its extent per side."""
    pts = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in point_sets])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    lo, hi = lo - margin * span, hi + margin * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def histogram2d(points, bounds, bins: int = BINS) -> np.ndarray:
    """Normalised 2-D histogram; out-of-range points clamp to the edge bins."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("histogram2d needs at least one point")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds}")
    ix = np.clip(np.floor((pts[:, 0] - x0) / (x1 - x0) * bins), 0, bins - 1).astype(np.intp)
    iy = np.clip(np.floor((pts[:, 1] - y0) / (y1 - y0) * bins), 0, bins - 1).astype(np.intp)
    counts = np.bincount(ix * bins + iy, minlength=bins * bins).astype(np.float64)
    return (counts / pts.shape[0]).reshape(bins, bins)


def jsd(P, Q) -> float:
    """Jensen-Shannon divergence in bits (range [0, 1]), with 0 log 0 = 0."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    M = 0.5 * (P + Q)

    def kl(A):
        nz = A > 0
        return float(np.sum(A[nz] * np.log2(A[nz] / M[nz])))

    return float(min(max(0.5 * kl(P) + 0.5 * kl(Q), 0.0), 1.0))


@dataclass(frozen=True, eq=False)
class LayerDistribution:
    layer: int
    histogram: np.ndarray
    bounds: tuple


def _layer_vectors(dataset, layer, heads, sample_cap, seed) -> np.ndarray:
    parts = [dataset.block(layer, h).vectors for h in heads]
    X = np.concatenate(parts, axis=0)
    if X.shape[0] > sample_cap:
        rng = np.random.default_rng([int(seed), int(layer)])
        X = X[np.sort(rng.choice(X.shape[0], size=sample_cap, replace=False))]
    return X


def pair_distributions(
    Xa, Xb, layer_a: int = 0, layer_b: int = 1, bins: int = BINS
) -> tuple[LayerDistribution, LayerDistribution]:
    """Histograms of two layers' vectors in their shared PCA plane."""
    A, _ = normalize_rows(Xa)
    B, _ = normalize_rows(Xb)
    pca = pca2_fit(np.concatenate([A, B], axis=0))
    pa, pb = pca.project(A), pca.project(B)
    bounds = shared_bounds(pa, pb)
    return (
        LayerDistribution(layer_a, histogram2d(pa, bounds, bins), bounds),
        LayerDistribution(layer_b, histogram2d(pb, bounds, bins), bounds),
    )


def layer_pair_jsd(
    dataset: CaptureDataset,
    layer_a: int,
    layer_b: int,
    head_mode: str = "pool",
    sample_cap: int = 10_000,
    seed: int = 0,
    bins: int = BINS,
) -> float:
    """JSD between two layers' cache-space distributions.

    ``head_mode="pool"`` merges all heads' vectors per layer; ``"per-head"``
    averages the per-head divergences.
    """
    heads = dataset.heads()
    if head_mode == "pool":
        groups = [heads]
    elif head_mode == "per-head":
        groups = [[h] for h in heads]
    else:
        raise ValueError(f"unknown head_mode {head_mode!r}")
    values = []
    for hs in groups:
        Xa = _layer_vectors(dataset, layer_a, hs, sample_cap, seed)
        Xb = _layer_vectors(dataset, layer_b, hs, sample_cap, seed)
        pa, pb = pair_distributions(Xa, Xb, layer_a, layer_b, bins)
        values.append(jsd(pa.histogram, pb.histogram))
    return float(np.mean(values))


@dataclass(frozen=True)
class MergePlan:
    groups: tuple
    delta1: float = DEFAULT_DELTA1
    delta2: float = DEFAULT_DELTA2
    kind: Kind = Kind.KEY

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(l) for l in g) for g in self.groups))
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def num_layers(self) -> int:
        return sum(len(g) for g in self.groups)

    def group_of(self, layer: int) -> int:
        for i, g in enumerate(self.groups):
            if layer in g:
                return i
        raise KeyError(f"layer {layer} is not in the merge plan")

    def validate(self, num_layers: Optional[int] = None) -> None:
        """Check the partition shape: disjoint, covering, contiguous ascending runs."""
        flat = [l for g in self.groups for l in g]
        if any(len(g) == 0 for g in self.groups):
            raise InvalidMergePlan("empty group")
        n = num_layers if num_layers is not None else len(flat)
        if sorted(flat) != list(range(n)) or len(flat) != n:
            raise InvalidMergePlan(f"groups do not partition layers 0..{n - 1}: {self.groups}")
        for g in self.groups:
            if list(g) != list(range(g[0], g[0] + len(g))):
                raise InvalidMergePlan(f"group {list(g)} is not a contiguous ascending run")

    def violations(self, divergence: Callable[[int, int], float]) -> list[str]:
        """Re-evaluate the pairwise and chain-sum thresholds on every group."""
        found = []
        for g in self.groups:
            for i, a in enumerate(g):
                for b in g[i + 1:]:
                    v = divergence(a, b)
                    if v > self.delta1:
                        found.append(f"JSD({a},{b})={v:.4f} > delta1={self.delta1}")
            chain = sum(divergence(a, b) for a, b in zip(g, g[1:]))
            if chain > self.delta2:
                found.append(f"chain sum over {list(g)} = {chain:.4f} > delta2={self.delta2}")
        return found

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "delta1": self.delta1,
            "delta2": self.delta2 if np.isfinite(self.delta2) else "inf",
            "groups": [list(g) for g in self.groups],
        }

    @classmethod
    def from_json(cls, meta: dict) -> "MergePlan":
        try:
            return cls(
                groups=meta["groups"],
                delta1=float(meta["delta1"]),
                delta2=float(meta["delta2"]),
                kind=Kind(meta["kind"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidMergePlan(f"bad merge plan JSON: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def singletons(cls, num_layers: int, kind: Kind = Kind.KEY) -> "MergePlan":
        return cls(tuple((l,) for l in range(num_layers)), kind=kind)


def greedy_merge(
    num_layers: int,
    divergence: Callable[[int, int], float],
    delta1: float = DEFAULT_DELTA1,
    delta2: float = DEFAULT_DELTA2,
    kind: Kind = Kind.KEY,
) -> MergePlan:
    """Left-to-right scan that grows a group while both thresholds still hold."""
    groups: list[list[int]] = []
    current: list[int] = [0]
    chain = 0.0
    for layer in range(1, num_layers):
        step = divergence(current[-1], layer)
        fits = chain + step <= delta2 and all(
            (step if m == current[-1] else divergence(m, layer)) <= delta1 for m in current
        )
        if fits:
            current.append(layer)
            chain += step
        else:
            groups.append(current)
            current, chain = [layer], 0.0
    groups.append(current)
    return MergePlan(tuple(tuple(g) for g in groups), delta1, delta2, kind)


class DivergenceCache:
    """Memoised, symmetric layer-pair JSD over one dataset."""

    def __init__(self, dataset: CaptureDataset, **kwargs):
        self.dataset = dataset
        self.kwargs = kwargs
        self._cache: dict[tuple[int, int], float] = {}

    def __call__(self, a: int, b: int) -> float:
        if a == b:
            return 0.0
        key = (min(a, b), max(a, b))
        if key not in self._cache:
            self._cache[key] = layer_pair_jsd(self.dataset, key[0], key[1], **self.kwargs)
        return self._cache[key]

    def matrix(self, layers: Sequence[int]) -> np.ndarray:
        n = len(layers)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = self(layers[i], layers[j])
        return out


def build_merge_plan(
    dataset: CaptureDataset,
    delta1: float = DEFAULT_DELTA1,
    delta2: float = DEFAULT_DELTA2,
    head_mode: str = "pool",
    sample_cap: int = 10_000,
    seed: int = 0,
    bins: int = BINS,
    divergence: Optional[DivergenceCache] = None,
) -> MergePlan:
    num_layers = dataset.header.num_layers
    missing = sorted(set(range(num_layers)) - set(dataset.layers()))
    if missing:
        raise KeyError(f"capture is missing layers {missing}")
    if divergence is None:
        divergence = DivergenceCache(
            dataset, head_mode=head_mode, sample_cap=sample_cap, seed=seed, bins=bins
        )
    return greedy_merge(num_layers, divergence, delta1, delta2, dataset.header.kind)
