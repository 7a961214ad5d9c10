"""Quality and footprint measurements for compressed caches."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .calib_io import CaptureDataset
from .codec import CodecConfig, Dictionary, SparseCode, desparse_batch, encode_batch
from .offline import OfflineDictionary

SCHEMA_VERSION = 1


def _row_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine; identical rows (including two zero rows) count as 1, one zero row as 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    cos = np.ones(A.shape[0])
    both = (na > 0) & (nb > 0)
    cos[both] = np.sum(A[both] * B[both], axis=1) / (na[both] * nb[both])
    cos[(na > 0) ^ (nb > 0)] = 0.0
    cos[np.all(A == B, axis=1)] = 1.0
    return np.clip(cos, -1.0, 1.0)


@dataclass(frozen=True)
class ReconMetrics:
    mse: float
    mean_cosine: float
    outlier_fraction: float


def reconstruction_metrics(X, codes: Sequence[SparseCode], dicts, cfg: CodecConfig) -> ReconMetrics:
    """Mean squared residual norm per row, mean row cosine, and outlier share."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, cfg.head_dim)
    if len(codes) != X.shape[0]:
        raise ValueError(f"{len(codes)} codes for {X.shape[0]} rows")
    if X.shape[0] == 0:
        return ReconMetrics(0.0, 1.0, 0.0)
    Xr = desparse_batch(codes, dicts, cfg).astype(np.float64)
    return ReconMetrics(
        mse=float(np.mean(np.sum((X - Xr) ** 2, axis=1))),
        mean_cosine=float(np.mean(_row_cosines(X, Xr))),
        outlier_fraction=float(np.mean([c.is_outlier for c in codes])),
    )


def attention(Q, K, V, causal: bool = False) -> np.ndarray:
    """Reference softmax attention in float32 (max-subtracted)."""
    Q = np.asarray(Q, dtype=np.float32)
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    scores = (Q @ K.T) / np.float32(math.sqrt(K.shape[1]))
    if causal:
        # queries are the last q positions of the sequence
        q, l = scores.shape
        mask = np.arange(l)[None, :] > (l - q + np.arange(q))[:, None]
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ V


def attention_fidelity(
    K, V, Q, cfg: CodecConfig, key_dicts, value_dicts=None,
    value_cfg: Optional[CodecConfig] = None, causal: bool = False,
) -> tuple[float, float]:
    """Compare attention outputs with original vs. decoded K and V.

    Returns the mean row cosine and the max absolute difference.
    """
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    Q = np.asarray(Q, dtype=np.float32)
    if K.shape != V.shape or K.ndim != 2 or Q.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValueError(f"inconsistent shapes K{K.shape} V{V.shape} Q{Q.shape}")
    value_cfg = value_cfg or cfg
    value_dicts = key_dicts if value_dicts is None else value_dicts
    K_hat = desparse_batch(encode_batch(K, key_dicts, cfg), key_dicts, cfg)
    V_hat = desparse_batch(encode_batch(V, value_dicts, value_cfg), value_dicts, value_cfg)
    O = attention(Q, K, V, causal)
    O_hat = attention(Q, K_hat, V_hat, causal)
    return float(np.mean(_row_cosines(O, O_hat))), float(np.max(np.abs(O - O_hat), initial=0.0))


# ---------------------------------------------------------------------------
# s sweep
# ---------------------------------------------------------------------------


@dataclass
class FidelityReport:
    rows: list = field(default_factory=list)
    footprint: list = field(default_factory=list)

    COLUMNS = ("s", "s_n", "mse", "mean_cosine", "outlier_fraction", "attn_cosine", "attn_max_abs")

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.DictWriter(out, fieldnames=list(self.COLUMNS), lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: row[k] for k in self.COLUMNS})
        return out.getvalue()

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "sweep": self.rows, "footprint": self.footprint}


def _lane_dicts(dicts, layer: int, head: int):
    if isinstance(dicts, OfflineDictionary):
        return dicts.slices(layer, head)
    return dicts


def sweep_s(
    dataset: CaptureDataset,
    dicts: Union[OfflineDictionary, Dictionary, Sequence[Dictionary]],
    s_list: Sequence[int],
    cfg: CodecConfig,
    max_rows: int = 512,
    num_queries: int = 16,
    seed: int = 0,
    causal: bool = False,
) -> FidelityReport:
    """Reconstruction and attention fidelity at every ``s`` in ``s_list``.

    Every (layer, head) block contributes its first ``max_rows`` vectors.  The
    block is used as both K and V of a toy attention whose queries are noisy
    copies of random block rows.  Metrics are averaged over blocks.
    """
    rng = np.random.default_rng(seed)
    lanes = []
    for block in dataset.blocks:
        X = np.asarray(block.vectors[:max_rows], dtype=np.float32)
        if X.shape[0] == 0:
            continue
        pick = rng.integers(0, X.shape[0], size=num_queries)
        Q = X[pick] + 0.1 * np.std(X) * rng.standard_normal((num_queries, X.shape[1])).astype(np.float32)
        lanes.append((block.layer, block.head, X, Q))
    report = FidelityReport()
    for s in sorted(s_list):
        scfg = CodecConfig(s, cfg.s_n, cfg.head_dim, cfg.outlier_threshold)
        acc = []
        for layer, head, X, Q in lanes:
            d = _lane_dicts(dicts, layer, head)
            m = reconstruction_metrics(X, encode_batch(X, d, scfg), d, scfg)
            cos, err = attention_fidelity(X, X, Q, scfg, d, causal=causal)
            acc.append((m.mse, m.mean_cosine, m.outlier_fraction, cos, err))
        a = np.array(acc) if acc else np.zeros((1, 5))
        report.rows.append({
            "s": s, "s_n": cfg.s_n,
            "mse": float(a[:, 0].mean()),
            "mean_cosine": float(a[:, 1].mean()),
            "outlier_fraction": float(a[:, 2].mean()),
            "attn_cosine": float(a[:, 3].mean()),
            "attn_max_abs": float(a[:, 4].max()),
        })
    return report


# ---------------------------------------------------------------------------
# Footprint model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    num_layers: int
    num_heads: int
    head_dim: int
    batch: int = 1
    offline_groups: Optional[int] = None


@dataclass(frozen=True)
class Fp16:
    @property
    def name(self) -> str:
        return "fp16"


@dataclass(frozen=True)
class Csr:
    s: int
    s_n: int = 1
    online_size: int = 0
    offline_atoms: int = 0

    @property
    def name(self) -> str:
        return f"csr(s={self.s},s_n={self.s_n})"


@dataclass(frozen=True)
class KBit:
    bits: float

    @property
    def name(self) -> str:
        return f"{self.bits:g}-bit"


Method = Union[Fp16, Csr, KBit]


def method_bytes(method: Method, length: int, g: Geometry, overhead: bool = True) -> float:
    """Analytic cache bytes at ``length`` tokens per sequence.

    CSR codes take 4 bytes per (index, coefficient) entry.  The online part
    stores ceil(online_size / 2) sampled fp16 vectors per lane (negated atoms
    are implied), and the offline dictionary is counted once per group and head.
    """
    lanes = g.num_layers * g.num_heads * g.batch
    if isinstance(method, Fp16):
        return 2 * g.head_dim * lanes * length
    if isinstance(method, KBit):
        return method.bits / 8 * g.head_dim * lanes * length
    codes = 4 * method.s * method.s_n * lanes * length
    if not overhead:
        return codes
    online = math.ceil(method.online_size / 2) * g.head_dim * 2 * lanes
    groups = g.offline_groups if g.offline_groups is not None else g.num_layers
    offline = method.offline_atoms * g.head_dim * 2 * g.num_heads * groups
    return codes + online + offline


def compression_ratio(method: Method, length: int, g: Geometry, overhead: bool = True) -> float:
    b = method_bytes(method, length, g, overhead)
    return method_bytes(Fp16(), length, g) / b if b else 0.0


def footprint_curve(seq_lengths: Sequence[int], geometry: Geometry, methods: Sequence[Method]) -> list[dict]:
    rows = []
    for length in seq_lengths:
        if length < 0:
            raise ValueError("sequence lengths must be non-negative")
        for m in methods:
            rows.append({"seq_len": int(length), "method": m.name, "bytes": method_bytes(m, length, geometry)})
    return rows


FOOTPRINT_COLUMNS = ("seq_len", "method", "bytes")


def footprint_csv(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(FOOTPRINT_COLUMNS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        b = r["bytes"]
        w.writerow({**r, "bytes": int(b) if float(b).is_integer() else b})
    return out.getvalue()


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    name: str
    passed: bool
    claim: str
    numbers: dict

    def line(self) -> str:
        nums = ", ".join(f"{k}={_fmt(v)}" for k, v in self.numbers.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.claim} [{nums}]"


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return f"{v:.6g}" if isinstance(v, float) else str(v)


@dataclass
class AblationReport:
    seed: int
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "passed": self.passed,
            "ablations": [asdict(r) for r in self.results],
        }

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def _planted(generator, head_dim: int, n: int, seed: int, scale: float = 1.0) -> np.ndarray:
    from .calib_io import SyntheticSpec, generate_synthetic

    ds = generate_synthetic(SyntheticSpec(1, 1, head_dim, n, generator, seed=seed))
    return np.asarray(ds.block(0, 0).vectors, dtype=np.float64) * scale


def ablate_dictionary_size(seed: int = 0, sizes=(64, 128, 256)) -> AblationResult:
    from .calib_io import PlantedDictionary
    from .neural_dict import TrainConfig, train_neural_dict

    X = _planted(PlantedDictionary(256, 4, 0.01), 32, 6000, seed)
    losses = []
    for n in sizes:
        cfg = TrainConfig(num_atoms=n, s_train=4, epochs=8, learning_rate=0.01, seed=seed)
        _, rep = train_neural_dict(X[:5000], cfg, X[5000:])
        losses.append(rep.val_mse[-1])
    ok = all(a > b for a, b in zip(losses, losses[1:]))
    return AblationResult("dictionary_size", ok, "converged loss strictly decreases with N",
                          {"sizes": list(sizes), "val_mse": losses})


def ablate_chunking(seed: int = 0) -> AblationResult:
    """Per-chunk planted data at equal budget: (s=4, s_n=1) vs (s=2, s_n=2)."""
    from .calib_io import PlantedDictionary
    from .neural_dict import TrainConfig, train_neural_dict

    d, half = 32, 16
    X = _planted(PlantedDictionary(16, 2, 0.01, chunks=2), d, 6000, seed)
    tr, va = X[:5000], X[5000:]
    cfg1 = TrainConfig(num_atoms=32, s_train=4, s_n=1, epochs=10, learning_rate=0.01, seed=seed)
    _, rep = train_neural_dict(tr, cfg1, va)
    one = rep.val_mse[-1]
    two = 0.0
    for c in range(2):
        cols = slice(c * half, (c + 1) * half)
        cfg2 = TrainConfig(num_atoms=32, s_train=2, s_n=2, epochs=10, learning_rate=0.01, seed=seed)
        _, rep = train_neural_dict(tr[:, cols], cfg2, va[:, cols])
        two += rep.val_mse[-1]
    return AblationResult("chunking", two <= one, "s_n=2 loss <= s_n=1 loss at equal entry budget",
                          {"val_mse_sn1": one, "val_mse_sn2": two})


def ablate_diversity(seed: int = 0, runs: int = 5) -> AblationResult:
    """Small-norm data so the adaptive weight stays below its cap."""
    from .calib_io import PlantedDictionary
    from .neural_dict import TrainConfig, train_neural_dict

    on, off = [], []
    for k in range(runs):
        X = _planted(PlantedDictionary(64, 3, 0.01), 16, 3000, seed + k, scale=0.2)
        for use, acc in ((True, on), (False, off)):
            cfg = TrainConfig(num_atoms=64, s_train=4, epochs=10, learning_rate=0.05,
                              seed=seed + k, use_div=use)
            _, rep = train_neural_dict(X, cfg)
            acc.append(rep.train_mse[-1])
    m_on, m_off = float(np.mean(on)), float(np.mean(off))
    return AblationResult("diversity_loss", m_on <= m_off + 1e-6,
                          "mean converged loss with L_div <= without (+1e-6)",
                          {"mse_on": m_on, "mse_off": m_off, "runs": runs})


def ablate_online(seed: int = 0, s: int = 2, online_size: int = 64) -> AblationResult:
    """Offline atoms trained on one distribution, prompt drawn from another."""
    from .calib_io import PlantedDictionary
    from .neural_dict import TrainConfig, train_neural_dict
    from .runtime import build_prompt_dictionary

    d = 16
    calib = _planted(PlantedDictionary(32, 2, 0.01), d, 3000, seed)
    prompt = _planted(PlantedDictionary(8, 2, 0.01), d, 512, seed + 1000)
    offline, _ = train_neural_dict(calib, TrainConfig(num_atoms=64, s_train=s, epochs=5, seed=seed))
    cfg = CodecConfig(s, 1, d)
    res = {}
    for label, size in (("off", 0), ("on", online_size)):
        pd = build_prompt_dictionary([offline], prompt, size, cfg, seed=seed)
        codes = encode_batch(prompt, list(pd.chunks), cfg)
        res[label] = reconstruction_metrics(prompt, codes, list(pd.chunks), cfg).mse
    return AblationResult("online_part", res["on"] <= res["off"],
                          f"online atoms reduce mean residual at s={s}",
                          {"mse_off": res["off"], "mse_on": res["on"], "online_size": online_size})


ABLATIONS = (ablate_dictionary_size, ablate_chunking, ablate_diversity, ablate_online)


def ablation_suite(seed: int = 0) -> AblationReport:
    """The four directional checks; failures are report entries, never exceptions."""
    return AblationReport(seed, [fn(seed) for fn in ABLATIONS])
