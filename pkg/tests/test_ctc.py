import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dppeft import autodiff as ad
from dppeft.ctc import (
    CTCInfeasibleError,
    WerReport,
    ctc_batch_forward_backward,
    ctc_forward_backward,
    ctc_loss,
    greedy_decode,
    min_frames,
    wer,
)

from oracles import ctc_brute_force, numerical_grad, rel_err, wer_brute_force


def _logp(rng, t, v):
    x = rng.normal(size=(t, v)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def test_brute_force_small_grid():
    rng = np.random.default_rng(0)
    for t, v in [(1, 2), (2, 3), (3, 3), (4, 3), (4, 2)]:
        for n in range(0, 3):
            for labels in itertools.product(range(1, v), repeat=n):
                if t < max(min_frames(labels), 1):
                    continue
                lp = _logp(rng, t, v)
                loss, _ = ctc_forward_backward(lp, labels)
                assert abs(loss - ctc_brute_force(lp, labels)) < 1e-9


def test_repeated_label_needs_blank():
    assert min_frames([1, 1]) == 3
    with pytest.raises(CTCInfeasibleError):
        ctc_forward_backward(np.log(np.full((2, 2), 0.5)), [1, 1])


def test_uniform_single_frame():
    lp = np.log(np.full((1, 2), 0.5))
    loss, _ = ctc_forward_backward(lp, [1])
    assert loss == pytest.approx(np.log(2))


def test_blank_out_of_labels():
    with pytest.raises(ValueError):
        ctc_forward_backward(np.log(np.full((3, 3), 1 / 3)), [0, 1])


def test_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 4))
    labels = [1, 3, 3, 2]

    def value():
        with ad.precision(np.float64):
            return float(ctc_loss(ad.log_softmax(ad.Tensor(x), axis=-1), labels).data)

    with ad.precision(np.float64):
        leaf = ad.Tensor(x, requires_grad=True)
        g = ad.backward(ctc_loss(ad.log_softmax(leaf, axis=-1), labels))[leaf]
    assert rel_err(g, numerical_grad(value, x, 1e-5)) < 1e-5


def test_batch_rows_match_single_sequences():
    rng = np.random.default_rng(2)
    lps = np.stack([_logp(rng, 6, 4) for _ in range(3)])
    lengths = [6, 4, 2]
    labels = [[1, 2, 3], [2, 2], [3]]
    losses, grads = ctc_batch_forward_backward(lps, lengths, labels)
    for b in range(3):
        l1, g1 = ctc_forward_backward(lps[b, : lengths[b]], labels[b])
        assert losses[b] == pytest.approx(l1, abs=1e-12)
        np.testing.assert_allclose(grads[b, : lengths[b]], g1, atol=1e-12)
        assert not grads[b, lengths[b] :].any()


def test_greedy_decode():
    ids = [0, 1, 1, 0, 1, 2, 2, 0]
    lp = np.log(np.eye(3)[ids] * 0.9 + 0.1 / 3)
    assert greedy_decode(lp) == [1, 1, 2]
    assert greedy_decode(lp, length=3) == [1]


def test_wer_examples():
    assert wer(["a", "b", "c"], ["a", "b", "c"]).errors == 0
    assert wer(["a"], []).wer == 1.0
    r = wer(["a", "b", "c"], ["a", "x", "c", "d"])
    assert (r.substitutions, r.insertions, r.deletions) == (1, 1, 0)
    with pytest.raises(ValueError):
        wer([], ["a"])


words = st.lists(st.sampled_from("abcd"), max_size=6)


@settings(max_examples=300, deadline=None)
@given(words.filter(bool), words)
def test_wer_matches_exhaustive_alignment(ref, hyp):
    r = wer(ref, hyp)
    best, (s, i, d) = wer_brute_force(ref, hyp)
    assert r.errors == best
    assert (r.substitutions, r.insertions, r.deletions) == (s, i, d)


@settings(max_examples=200, deadline=None)
@given(words.filter(bool), words.filter(bool))
def test_wer_swap_exchanges_insertions_and_deletions(ref, hyp):
    a = wer(ref, hyp)
    b = wer(hyp, ref)
    assert a.errors == b.errors
    assert (a.insertions, a.deletions) == (b.deletions, b.insertions)


def test_wer_report_adds():
    total = WerReport(1, 0, 2, 5) + WerReport(0, 1, 0, 5)
    assert total.wer == pytest.approx(4 / 10)
