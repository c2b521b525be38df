"""
Trainable parameter counts per PEFT method
==========================================

Every method starts out as the identity on the base model, so the loss does
not move until training does.
"""

from dppeft.data import CorpusSpec, collate, synthesize_corpus
from dppeft.dpsgd import batch_loss
from dppeft.model import ModelConfig, init_model
from dppeft.peft import PeftConfig, apply_peft
from dppeft.rng import Rng

base = init_model(ModelConfig(), Rng(0))
batch = collate(synthesize_corpus(CorpusSpec(num_utterances=8, words_per_utterance=3, vocab_words=50, seed=1), voice_seed=1))
print("base loss", float(batch_loss(base, batch)[0].data))

for method, placement in [("full", "ffn"), ("bitfit", "ffn"), ("lora", "ffn"), ("rp", "ffn"),
                          ("lora", "attention"), ("rp", "attention"), ("adapter", "ffn")]:
    params, rep = apply_peft(base, PeftConfig(method, rank=4, placement=placement), Rng(1))
    loss = float(batch_loss(params, batch)[0].data)
    print(f"{method:8s} {placement:9s} trainable={rep.trainable_params:7d} ({100 * rep.trainable_fraction:5.2f}%) loss={loss:.6f}")
