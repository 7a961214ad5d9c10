"""NeuralDict: gradient-trained offline dictionaries.

The dictionary ``W`` (``chunk_dim x N``) is the weight of a bias-free linear
layer.  Each step encodes a batch with MP under the current ``W``, holds the
codes fixed, and descends on::

    L = sum_x ||x - W r(x)||^2 + beta * ||I - W^T W||_F^2 / N^2

with ``beta = min(beta_scale * mse / div, beta_cap)`` taken from the previous
batch's detached losses.  Columns are renormalised after every step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .calib_io import CaptureDataset, Kind, sample_vectors
from .codec import Dictionary, Provenance, mp_batch
from .layer_merge import MergePlan
from .offline import OfflineDictionary

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12
DIV_EPS = 1e-12


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_atoms: int = 256
    s_train: int = 8
    s_n: int = 1
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    beta_cap: float = 1.0
    beta_scale: float = 0.1
    seed: int = 0
    kmeans_iters: int = 25
    use_div: bool = True
    converge_tol: float = 1e-3

    def __post_init__(self):
        for name in ("num_atoms", "s_train", "s_n", "batch_size", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def for_kind(cls, kind: Kind, **overrides) -> "TrainConfig":
        """Key caches train with s=8, s_n=1; value caches with s=4, s_n=2."""
        base = dict(s_train=8, s_n=1) if Kind(kind) is Kind.KEY else dict(s_train=4, s_n=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainState:
    W: np.ndarray
    beta: Optional[float] = None
    last_mse: float = math.nan
    last_div: float = math.nan
    epoch: int = 0
    step: int = 0


@dataclass
class TrainReport:
    initial_train_mse: float
    initial_val_mse: Optional[float]
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    div_loss: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    converged: bool = False
    epoch_seconds: list = field(default_factory=list, compare=False)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def renorm(W, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Scale every column to unit norm; (near-)zero columns become random unit vectors."""
    W = np.array(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    dead = norms < ZERO_NORM
    if dead.any():
        rng = rng if rng is not None else np.random.default_rng()
        fresh = rng.standard_normal((W.shape[0], int(dead.sum())))
        W[:, dead] = fresh / np.linalg.norm(fresh, axis=0)
        norms[dead] = 1.0
    return W / norms


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    d2 = np.sum((X - centres[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centres[j] = X[pick]
        d2 = np.minimum(d2, np.sum((X - centres[j]) ** 2, axis=1))
    return centres


def _lloyd(X: np.ndarray, centres: np.ndarray, iters: int) -> np.ndarray:
    k = centres.shape[0]
    x2 = np.sum(X * X, axis=1)[:, None]
    for _ in range(iters):
        dist = x2 - 2.0 * X @ centres.T + np.sum(centres * centres, axis=1)[None, :]
        labels = np.argmin(dist, axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centres)
        np.add.at(sums, labels, X)
        filled = counts > 0
        # empty clusters keep their previous centre
        centres[filled] = sums[filled] / counts[filled, None]
    return centres


def kmeans_init(
    X, num_atoms: int, seed: int = 0, iters: int = 25,
    rng: Optional[np.random.Generator] = None, kind: Kind = Kind.KEY,
) -> Dictionary:
    """k-means++ seeded Lloyd clustering; the normalised centroids become atoms.

    When ``num_atoms`` is at least the number of distinct rows, every distinct
    row becomes an atom and the remainder are random unit vectors.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("kmeans_init needs a non-empty sample matrix")
    rng = rng if rng is not None else np.random.default_rng(seed)
    distinct = np.unique(X, axis=0)
    if num_atoms >= distinct.shape[0]:
        W = np.zeros((X.shape[1], num_atoms))
        W[:, : distinct.shape[0]] = distinct.T
    else:
        centres = _lloyd(X, _kmeans_pp(X, num_atoms, rng), iters)
        W = centres.T
    return Dictionary(renorm(W, rng), kind=kind)


def loss_mse(W, batch, s: int):
    """Summed squared MP reconstruction error; also returns the codes ``(idx, coef)``."""
    W = _as_matrix(W)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != W.shape[0]:
        raise ValueError(f"batch rows must have length {W.shape[0]}, got shape {batch.shape}")
    idx, coef, R = mp_batch(batch, W, s)
    return float(np.sum(R * R)), (idx, coef)


def loss_div(W) -> float:
    W = _as_matrix(W)
    n = W.shape[1]
    G = W.T @ W
    return float(np.sum((np.eye(n) - G) ** 2) / (n * n))


def code_matrix(codes, num_atoms: int) -> sp.csr_matrix:
    """Sparse ``(n, N)`` matrix of codes; repeated indices are summed."""
    idx, coef = codes
    n, s = idx.shape
    live = idx >= 0
    rows = np.repeat(np.arange(n), s).reshape(n, s)[live]
    return sp.csr_matrix((coef[live], (rows, idx[live])), shape=(n, num_atoms))


def mse_grad(W, batch, codes) -> np.ndarray:
    """d/dW of sum ||x - W r||^2 with the codes r held fixed: -2 sum (x - W r) r^T."""
    W = _as_matrix(W)
    Rc = code_matrix(codes, W.shape[1])
    E = np.asarray(batch, dtype=np.float64) - (Rc @ W.T)
    return -2.0 * (Rc.T @ E).T


def div_grad(W) -> np.ndarray:
    W = _as_matrix(W)
    n = W.shape[1]
    return (4.0 / (n * n)) * W @ (W.T @ W - np.eye(n))


def adaptive_beta(last_mse: float, last_div: float, scale: float = 0.1, cap: float = 1.0) -> float:
    return float(min(scale * last_mse / max(last_div, DIV_EPS), cap))


def _as_matrix(W) -> np.ndarray:
    if isinstance(W, Dictionary):
        return W._atoms64
    return np.asarray(W, dtype=np.float64)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def grad_step(
    state: TrainState, batch, cfg: TrainConfig, rng: Optional[np.random.Generator] = None
) -> TrainState:
    """One descent step on the batch, then beta update and column renormalisation."""
    W = state.W
    mse, codes = loss_mse(W, batch, cfg.s_train)
    div = loss_div(W) if cfg.use_div else 0.0
    beta = state.beta
    if beta is None:
        beta = adaptive_beta(mse, div, cfg.beta_scale, cfg.beta_cap) if cfg.use_div else 0.0
    grad = mse_grad(W, batch, codes)
    if cfg.use_div and beta > 0:
        grad = grad + beta * div_grad(W)
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged(
            f"non-finite gradient at epoch {state.epoch}, step {state.step} "
            f"(mse={mse:.4g}, div={div:.4g}, beta={beta:.4g}); lower the learning rate"
        )
    W_new = renorm(W - cfg.learning_rate * grad, rng)
    new_beta = adaptive_beta(mse, div, cfg.beta_scale, cfg.beta_cap) if cfg.use_div else 0.0
    return TrainState(W_new, new_beta, mse, div, state.epoch, state.step + 1)


def _mean_mse(W, X, s) -> Optional[float]:
    if X is None or len(X) == 0:
        return None
    total = 0.0
    for start in range(0, X.shape[0], 4096):
        total += loss_mse(W, X[start:start + 4096], s)[0]
    return total / X.shape[0]


def train_neural_dict(
    X, cfg: TrainConfig, validation=None, kind: Kind = Kind.KEY
) -> tuple[Dictionary, TrainReport]:
    """Train one dictionary on chunk-width rows ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty matrix")
    V = None if validation is None or len(validation) == 0 else np.asarray(validation, np.float64)
    rng = np.random.default_rng(cfg.seed)
    init = kmeans_init(X, cfg.num_atoms, iters=cfg.kmeans_iters, rng=rng, kind=kind)
    state = TrainState(init._atoms64.copy())
    report = TrainReport(_mean_mse(state.W, X, cfg.s_train), _mean_mse(state.W, V, cfg.s_train))
    if cfg.epochs == 0:
        return init, report

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.epoch = epoch
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], cfg.batch_size):
            state = grad_step(state, X[order[start:start + cfg.batch_size]], cfg, rng)
        report.train_mse.append(_mean_mse(state.W, X, cfg.s_train))
        report.val_mse.append(_mean_mse(state.W, V, cfg.s_train))
        report.div_loss.append(loss_div(state.W))
        report.beta.append(state.beta)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d: train mse %.5g", epoch, report.train_mse[-1])

    if len(report.train_mse) >= 2:
        prev, last = report.train_mse[-2], report.train_mse[-1]
        report.converged = prev - last <= cfg.converge_tol * max(prev, DIV_EPS)
    return Dictionary(state.W, kind=kind, provenance=Provenance.OFFLINE), report


def train_on_merged_layers(
    dataset: CaptureDataset,
    plan: MergePlan,
    cfg: TrainConfig,
    per_head_atoms: Optional[int] = None,
    head_shared: bool = False,
    max_samples: int = 100_000,
    validation_fraction: float = 0.1,
    threads: int = 1,
) -> tuple[OfflineDictionary, dict]:
    """Train one dictionary per (group, head, chunk) on the group's concatenated layers.

    With ``head_shared`` all heads' vectors are pooled per group and the single
    dictionary is stored under every head.  Returns the dictionary set and the
    per-key training reports.
    """
    header = dataset.header
    plan.validate(header.num_layers)
    if header.head_dim % cfg.s_n:
        raise ValueError(f"head_dim {header.head_dim} is not divisible by s_n {cfg.s_n}")
    chunk_dim = header.head_dim // cfg.s_n
    per_head_atoms = cfg.num_atoms if per_head_atoms is None else per_head_atoms
    cfg = replace(cfg, num_atoms=per_head_atoms)
    heads = list(range(header.num_heads))
    lanes = [None] if head_shared else heads

    jobs = []
    for g, layers in enumerate(plan.groups):
        for lane in lanes:
            hs = heads if lane is None else [lane]
            X = np.concatenate(
                [sample_vectors(dataset, layers, h, max_samples, seed=cfg.seed) for h in hs]
            )
            rng = np.random.default_rng([cfg.seed, g, 0 if lane is None else lane + 1])
            order = rng.permutation(X.shape[0])
            n_val = int(round(validation_fraction * X.shape[0])) if X.shape[0] > 1 else 0
            val, train = X[order[:n_val]], X[order[n_val:]]
            for c in range(cfg.s_n):
                cols = slice(c * chunk_dim, (c + 1) * chunk_dim)
                jobs.append(((g, lane, c), train[:, cols], val[:, cols]))

    def run(job):
        key, train, val = job
        g, lane, c = key
        job_cfg = replace(cfg, seed=int(np.random.SeedSequence(
            [cfg.seed, g, 0 if lane is None else lane + 1, c]).generate_state(1)[0]))
        return key, train_neural_dict(train, job_cfg, val, kind=header.kind)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    entries, reports = {}, {}
    for (g, lane, c), (dictionary, report) in results:
        for h in (heads if lane is None else [lane]):
            entries[(g, h, c)] = dictionary
        reports[(g, "shared" if lane is None else lane, c)] = report

    offline = OfflineDictionary(
        kind=header.kind,
        chunk_dim=chunk_dim,
        s_n=cfg.s_n,
        per_head_atoms=per_head_atoms,
        plan=plan,
        num_heads=header.num_heads,
        train_config=asdict(cfg),
        seed=cfg.seed,
        head_shared=head_shared,
        entries=entries,
    )
    return offline, reports
