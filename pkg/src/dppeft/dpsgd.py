"""DP-SGD over the trainable parameters: per-example gradients, global L2
clipping, Gaussian noising of the sum, and Adam."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .accountant import PrivacyLedger
from .ctc import CTCInfeasibleError, ctc_loss_batch, min_frames
from .data import Batch
from .model import forward_logprobs, leaves, output_lengths
from .params import ParamStore
from .rng import Rng

WORKERS_ENV = "DPPEFT_WORKERS"

GradMap = dict[str, np.ndarray]


@dataclass(frozen=True)
class DpConfig:
    clip_bound: float = 2.5
    noise_multiplier: float | None = None  # None: calibrate to the target budget
    sampling: str = "poisson"  # or "shuffle"
    steps: int = 2000
    target_epsilon: float = 10.0
    target_delta: float = 3.52e-6
    delta_inverse_n: bool = False  # use delta = 1/N of the training set instead
    dp_enabled: bool = True

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.sampling not in ("poisson", "shuffle"):
            raise ValueError("sampling must be 'poisson' or 'shuffle'")

    def delta_for(self, n: int) -> float:
        return 1.0 / n if self.delta_inverse_n else self.target_delta

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DpConfig:
        return cls(**d)


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


# ---------------------------------------------------------------------------
# gradients


def _feasible(batch: Batch, frame_stack: int) -> np.ndarray:
    out_len = output_lengths(batch.lengths, frame_stack)
    return np.array([out_len[i] >= max(min_frames(l), 1) for i, l in enumerate(batch.labels)])


def example_gradient(params: ParamStore, batch: Batch, i: int) -> tuple[GradMap, float | None]:
    """Gradient of example ``i``'s CTC loss, computed on that example alone.

    Infeasible examples return a zero map and loss ``None``.
    """
    ex = batch.example(i)
    p = leaves(params)
    trainable = {n: t for n, t in p.items() if t.requires_grad}
    try:
        logp, out_len = forward_logprobs(params, ex.features, ex.lengths, p)
        loss = ad.sum(ctc_loss_batch(logp, out_len, ex.labels))
    except CTCInfeasibleError:
        return {n: np.zeros_like(t.data) for n, t in trainable.items()}, None
    return ad.grad(loss, trainable), float(loss.data)


def per_example_gradients(
    params: ParamStore, batch: Batch, workers: int | None = None
) -> tuple[list[GradMap], list[float | None]]:
    """One gradient map per example, in batch order, independent of ``workers``."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    workers = default_workers() if workers is None else workers
    if workers <= 1:
        results = [example_gradient(params, batch, i) for i in range(len(batch))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: example_gradient(params, batch, i), range(len(batch))))
    return [g for g, _ in results], [l for _, l in results]


def _length_chunks(lengths: np.ndarray, max_chunks: int, overhead_frames: int) -> list[np.ndarray]:
    """Partition indices (sorted by length) to minimize padded frames plus per-chunk overhead."""
    order = np.argsort(lengths, kind="stable")
    srt = lengths[order]
    n = len(srt)
    k = min(max_chunks, n)
    inf = float("inf")
    # best[c][j]: cost of covering the first j sorted items with c chunks
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    cut = [[0] * (n + 1) for _ in range(k + 1)]
    best[0][0] = 0.0
    for c in range(1, k + 1):
        for j in range(1, n + 1):
            for i in range(c - 1, j):
                if best[c - 1][i] == inf:
                    continue
                cost = best[c - 1][i] + (j - i) * srt[j - 1] + overhead_frames
                if cost < best[c][j]:
                    best[c][j] = cost
                    cut[c][j] = i
    c = min(range(1, k + 1), key=lambda c: best[c][n])
    bounds = []
    j = n
    while c > 0:
        i = cut[c][j]
        bounds.append((i, j))
        j, c = i, c - 1
    return [np.sort(order[i:j]) for i, j in reversed(bounds)]


def batch_loss(params: ParamStore, batch: Batch, p: dict | None = None, max_chunks: int = 1) -> tuple[ad.Tensor, int]:
    """Sum of feasible examples' CTC losses divided by the batch size.

    With ``max_chunks > 1`` the batch is split into length buckets padded
    separately, which only changes floating-point rounding.
    """
    cfg = params.config
    p = leaves(params) if p is None else p
    feasible = _feasible(batch, cfg.frame_stack)
    idx_all = np.flatnonzero(feasible)
    if idx_all.size == 0:
        zero = ad.Tensor(0.0)
        return zero, 0
    if max_chunks > 1:
        chunks = _length_chunks(batch.lengths[idx_all], max_chunks, overhead_frames=4 * cfg.frame_stack * 16)
        chunks = [idx_all[c] for c in chunks]
    else:
        chunks = [idx_all]
    total = None
    for idx in chunks:
        t = int(batch.lengths[idx].max())
        logp, out_len = forward_logprobs(params, batch.features[idx, :t], batch.lengths[idx], p)
        part = ad.sum(ctc_loss_batch(logp, out_len, [batch.labels[i] for i in idx]))
        total = part if total is None else total + part
    return ad.scale(total, 1.0 / len(batch)), int(idx_all.size)


def batch_gradient(params: ParamStore, batch: Batch, max_chunks: int = 1) -> tuple[GradMap, float]:
    """Gradient of :func:`batch_loss` (mean loss over the batch) via one backward pass."""
    p = leaves(params)
    trainable = {n: t for n, t in p.items() if t.requires_grad}
    loss, _ = batch_loss(params, batch, p, max_chunks=max_chunks)
    return ad.grad(loss, trainable), float(loss.data)


# ---------------------------------------------------------------------------
# privatization


def global_norm(g: GradMap) -> float:
    return math.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in g.values()))


def clip(g: GradMap, clip_bound: float) -> tuple[GradMap, float]:
    """Scale ``g`` by ``min(1, C / ||g||)`` using one norm over all tensors.

    Maps already within the bound are returned unchanged (same arrays).
    """
    if not clip_bound > 0:
        raise ValueError("clip bound must be positive")
    norm = global_norm(g)
    if norm <= clip_bound:
        return g, norm
    factor = clip_bound / norm
    return {k: (v.astype(np.float64) * factor).astype(v.dtype) for k, v in g.items()}, norm


def aggregate_and_noise(
    clipped: list[GradMap],
    clip_bound: float,
    noise_multiplier: float,
    rng: Rng,
    denominator: float,
) -> GradMap:
    """``(sum_i g_i + N(0, (noise_multiplier * C)^2 I)) / denominator``.

    Sums run in float64 in list order; noise is drawn tensor by tensor in key order.
    """
    if not clipped:
        raise ValueError("need at least one gradient map")
    std = noise_multiplier * clip_bound
    out = {}
    for k in clipped[0]:
        acc = np.zeros(clipped[0][k].shape, np.float64)
        for g in clipped:
            acc += g[k]
        if std > 0:
            acc += rng.child(k).normal(acc.shape, std, dtype=np.float64)
        out[k] = (acc / denominator).astype(clipped[0][k].dtype)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
    m = {n: np.zeros_like(params.value(n)) for n in params.trainable_names()}
    v = {n: np.zeros_like(params.value(n)) for n in params.trainable_names()}
    return AdamState(lr, beta1, beta2, eps_hat, 0, m, v)


def adam_step(params: ParamStore, state: AdamState, grads: GradMap) -> tuple[ParamStore, AdamState]:
    """Bias-corrected Adam on the trainable tensors; frozen tensors are shared untouched."""
    if set(grads) != set(state.m):
        raise ValueError("gradient keys do not match the optimizer state")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_m, new_v, updates = {}, {}, {}
    for name, g in grads.items():
        w = params.value(name)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {w.shape}")
        dt = w.dtype.type
        g = g.astype(w.dtype, copy=False)
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        updates[name] = w - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps_hat))
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps_hat, t, new_m, new_v)
    return params.with_values(updates), new_state


# ---------------------------------------------------------------------------
# one training step


@dataclass
class StepStats:
    loss: float
    batch_size: int
    infeasible: int = 0
    clipped_fraction: float = 0.0
    grad_norms: list[float] = field(default_factory=list)


def train_step(
    params: ParamStore,
    batch: Batch | None,
    dp: DpConfig,
    adam: AdamState,
    ledger: PrivacyLedger | None,
    rng: Rng,
    noise_multiplier: float = 0.0,
    denominator: float | None = None,
    workers: int | None = None,
    max_chunks: int = 1,
) -> tuple[StepStats, ParamStore, AdamState, PrivacyLedger | None]:
    """Per-example gradients -> clip -> noisy mean -> Adam; ledger advanced one step.

    ``denominator`` is the expected batch size under Poisson sampling (defaults
    to ``len(batch)``). ``batch`` may be ``None`` when Poisson sampling drew
    nobody; the step then applies pure noise. With ``dp.dp_enabled`` false the
    mean-loss gradient is taken directly and the ledger is left alone.
    """
    n = 0 if batch is None else len(batch)
    if not dp.dp_enabled:
        if n == 0:
            return StepStats(0.0, 0), params, adam, ledger
        grads, loss = batch_gradient(params, batch, max_chunks=max_chunks)
        infeasible = int((~_feasible(batch, params.config.frame_stack)).sum())
        params, adam = adam_step(params, adam, grads)
        return StepStats(loss, len(batch), infeasible), params, adam, ledger

    denominator = float(max(n, 1) if denominator is None else denominator)
    if n:
        per_ex, losses = per_example_gradients(params, batch, workers)
        clipped, norms = [], []
        for g in per_ex:
            c, n = clip(g, dp.clip_bound)
            clipped.append(c)
            norms.append(n)
    else:
        clipped, norms, losses = [], [], []
    if not clipped:
        clipped = [{n: np.zeros_like(params.value(n)) for n in params.trainable_names()}]
    noisy = aggregate_and_noise(clipped, dp.clip_bound, noise_multiplier, rng, denominator)
    params, adam = adam_step(params, adam, noisy)
    if ledger is not None:
        ledger.step()
    feas = [l for l in losses if l is not None]
    stats = StepStats(
        loss=float(np.sum(feas) / n) if feas else 0.0,
        batch_size=n,
        infeasible=sum(l is None for l in losses),
        clipped_fraction=float(np.mean([n > dp.clip_bound for n in norms])) if norms else 0.0,
        grad_norms=norms,
    )
    return stats, params, adam, ledger


# ---------------------------------------------------------------------------
# batch samplers


def poisson_sample(n: int, q: float, rng: Rng) -> np.ndarray:
    """Each index included independently with probability ``q``."""
    return np.flatnonzero(rng.uniform(n) < q)


def shuffle_batches(n: int, batch_size: int, rng: Rng):
    """Endless fixed-size batches from successive seeded permutations."""
    epoch = 0
    while True:
        perm = rng.child("epoch", epoch).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]
        epoch += 1
