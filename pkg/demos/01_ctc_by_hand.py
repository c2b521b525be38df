"""
CTC on a toy alphabet
=====================

Blank is id 0. The loss sums over every frame path that collapses to the
label sequence; here we check that against brute force and then decode.
"""

import itertools

import numpy as np

from dppeft import autodiff as ad
from dppeft.ctc import ctc_forward_backward, ctc_loss, greedy_decode, wer

rng = np.random.default_rng(0)
x = rng.normal(size=(4, 3))
logp = x - np.logaddexp.reduce(x, axis=1, keepdims=True)
labels = [1, 2]

loss, _ = ctc_forward_backward(logp, labels)


def collapse(path):
    out = [k for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
    return out


total = sum(np.exp(sum(logp[t, k] for t, k in enumerate(p)))
            for p in itertools.product(range(3), repeat=4) if collapse(p) == labels)
print("forward-backward:", loss)
print("brute force:     ", -np.log(total))

# the gradient comes out of the same tape as every other op
leaf = ad.Tensor(x, requires_grad=True)
g = ad.backward(ctc_loss(ad.log_softmax(leaf, axis=-1), labels))[leaf]
print("d loss / d logits, rows sum to ~0:", g.sum(axis=1).round(6))

print("greedy path ids:", greedy_decode(logp))
print(wer("the cat sat".split(), "the bat sat down".split()).to_dict())
