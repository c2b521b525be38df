"""CTC loss, best-path decoding and word error rate.

The blank label is always id 0. The loss is computed with the log-space
forward-backward recursion; the same recursion yields the exact gradient with
respect to the frame log-probabilities, which is registered as the VJP of the
``ctc_loss`` op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLANK = 0
NEG_INF = -1e30


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be aligned to the available frames."""


def min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per label plus one blank per adjacent repeat."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


def _check_labels(labels: np.ndarray, vocab: int) -> None:
    if labels.size and (labels.min() < 1 or labels.max() >= vocab):
        raise ValueError(f"label ids must lie in [1, {vocab}); blank (0) is not a label")


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def ctc_batch_forward_backward(log_probs: np.ndarray, lengths, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence negative log-likelihoods ``[B]`` and gradients ``[B, T, V]``.

    ``log_probs`` is ``[B, T, V]``; sequence ``b`` uses frames ``[:lengths[b]]``
    and the gradient is zero beyond that. All rows are processed with the same
    elementwise recursion, so row ``b``'s result does not depend on the others.
    Work is done in float64 regardless of the input dtype.
    """
    lp_full = np.asarray(log_probs, dtype=np.float64)
    bsz, t_max, vocab = lp_full.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    labels = [np.asarray(l, dtype=np.int64).ravel() for l in labels]
    if lengths.shape != (bsz,) or len(labels) != bsz:
        raise ad.ShapeError("need one length and one label sequence per batch row")
    for b, lab in enumerate(labels):
        _check_labels(lab, vocab)
        need = min_frames(lab)
        if lengths[b] < max(need, 1) or lengths[b] > t_max:
            raise CTCInfeasibleError(
                f"sequence {b}: {lab.size} labels need {need} frames, {lengths[b]} available"
            )

    s_lens = np.array([2 * lab.size + 1 for lab in labels])
    s_max = int(s_lens.max())
    ext = np.zeros((bsz, s_max), dtype=np.int64)
    state_ok = np.arange(s_max)[None, :] < s_lens[:, None]
    for b, lab in enumerate(labels):
        ext[b, 1 : 2 * lab.size : 2] = lab
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2]) & state_ok[:, 2:]
    rows = np.arange(bsz)[:, None, None]
    frames = np.arange(t_max)[None, :, None]
    lp = lp_full[rows, frames, ext[:, None, :]]  # [B, T, S]
    lp = np.where(state_ok[:, None, :], lp, NEG_INF)

    alpha = np.full((bsz, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = lp[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = lp[:, 0, 1]  # already NEG_INF where the state does not exist
    sh1 = np.full((bsz, s_max), NEG_INF)
    sh2 = np.full((bsz, s_max), NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        sh1[:, 1:] = prev[:, :-1]
        sh2[:, 2:] = np.where(skip[:, 2:], prev[:, :-2], NEG_INF)
        alpha[:, t] = _lse3(prev, sh1, sh2) + lp[:, t]

    # beta[b, t, s]: log-prob of emitting frames t+1 .. lengths[b]-1 from state s at frame t
    last = lengths - 1
    beta_init = np.full((bsz, s_max), NEG_INF)
    beta_init[np.arange(bsz), s_lens - 1] = 0.0
    has_two = s_lens > 1
    beta_init[np.arange(bsz)[has_two], (s_lens - 2)[has_two]] = 0.0
    beta = np.full((bsz, t_max, s_max), NEG_INF)
    nx1 = np.full((bsz, s_max), NEG_INF)
    nx2 = np.full((bsz, s_max), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nb = beta[:, t + 1] + lp[:, t + 1]
            nx1[:, :-1] = nb[:, 1:]
            nx2[:, :-2] = np.where(skip[:, 2:], nb[:, 2:], NEG_INF)
            cand = _lse3(nb, nx1, nx2)
        else:
            cand = beta[:, t]
        at_end = (t == last)[:, None]
        beta[:, t] = np.where(at_end, beta_init, np.where((t < last)[:, None], cand, NEG_INF))

    end_alpha = alpha[np.arange(bsz), last]  # [B, S]
    end_mask = (np.arange(s_max)[None, :] >= (s_lens - 2)[:, None]) & state_ok
    log_like = np.logaddexp.reduce(np.where(end_mask, end_alpha, NEG_INF), axis=1)
    occupancy = np.exp(alpha + beta - log_like[:, None, None])  # state posteriors
    onehot = (ext[:, :, None] == np.arange(vocab)[None, None, :]) & state_ok[:, :, None]
    grad = -(occupancy @ onehot.astype(np.float64))
    return -log_like, grad


def ctc_forward_backward(log_probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. one sequence's ``log_probs`` ([T, V])."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ad.ShapeError(f"expected [T, V] log-probabilities, got {lp.shape}")
    loss, grad = ctc_batch_forward_backward(lp[None], [lp.shape[0]], [labels])
    return float(loss[0]), grad[0]


def _ctc_fwd(log_probs, labels):
    loss, grad = ctc_forward_backward(log_probs, labels)
    return np.asarray(loss, dtype=log_probs.dtype), grad.astype(log_probs.dtype)


def _ctc_vjp(g, grad, needs, labels):
    return (g * grad,)


def _ctc_batch_fwd(log_probs, lengths, labels):
    loss, grad = ctc_batch_forward_backward(log_probs, lengths, labels)
    return loss.astype(log_probs.dtype), grad.astype(log_probs.dtype)


def _ctc_batch_vjp(g, grad, needs, lengths, labels):
    return (g[:, None, None] * grad,)


ad.register_op("ctc_loss", _ctc_fwd, _ctc_vjp)
ad.register_op("ctc_loss_batch", _ctc_batch_fwd, _ctc_batch_vjp)


def ctc_loss(log_probs: Tensor, labels) -> Tensor:
    """Scalar ``-log p(labels | log_probs)`` for one sequence ``[T', V]``."""
    if log_probs.ndim != 2:
        raise ad.ShapeError(f"ctc_loss expects [T, V] log-probabilities, got {log_probs.shape}")
    return ad.apply("ctc_loss", log_probs, labels=tuple(int(x) for x in np.asarray(labels).ravel()))


def ctc_loss_batch(log_probs: Tensor, lengths, labels) -> Tensor:
    """Per-sequence losses ``[B]`` for padded ``[B, T', V]`` log-probabilities."""
    if log_probs.ndim != 3:
        raise ad.ShapeError(f"ctc_loss_batch expects [B, T, V], got {log_probs.shape}")
    return ad.apply(
        "ctc_loss_batch",
        log_probs,
        lengths=tuple(int(x) for x in lengths),
        labels=tuple(tuple(int(x) for x in np.asarray(l).ravel()) for l in labels),
    )


def greedy_decode(log_probs: np.ndarray, length: int | None = None) -> list[int]:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs)
    if length is not None:
        lp = lp[:length]
    best = lp.argmax(axis=-1)
    out: list[int] = []
    prev = -1
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def __add__(self, other: WerReport) -> WerReport:
        return WerReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )

    def to_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_words": self.ref_words,
            "wer": self.wer,
        }


def wer(reference: list[str], hypothesis: list[str]) -> WerReport:
    """Word-level edit distance with uniform costs.

    Among minimum-distance alignments the one with fewest insertions plus
    deletions is chosen, which makes the S/I/D split unique and swaps I with D
    when reference and hypothesis are exchanged.
    """
    if not reference:
        raise ValueError("reference must contain at least one word")
    n, m = len(reference), len(hypothesis)
    # cost[i][j] = (edits, indels) for reference[:i] vs hypothesis[:j]
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i)
    for j in range(1, m + 1):
        cost[0][j] = (j, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, g = cost[i - 1][j - 1]
            diag = (e + (reference[i - 1] != hypothesis[j - 1]), g)
            e, g = cost[i - 1][j]
            dele = (e + 1, g + 1)
            e, g = cost[i][j - 1]
            ins = (e + 1, g + 1)
            cost[i][j] = min(diag, dele, ins)
    edits, indels = cost[n][m]
    # indels = I + D and I - D = m - n fix the split
    ins_count = (indels + (m - n)) // 2
    del_count = indels - ins_count
    return WerReport(edits - indels, ins_count, del_count, n)
