"""
A small DP-BitFit run end to end
================================

Writes a synthetic corpus to a temp dir, pretrains biases and head without
privacy on the public split, then fine-tunes the biases under DP-SGD and
prints both reports. Under a minute on one core.
"""

import os
import tempfile
from dataclasses import replace

from dppeft.dpsgd import DpConfig
from dppeft.experiment import ExperimentConfig, generate_suite, render_report, run_dp_finetune, run_pretrain
from dppeft.model import ModelConfig
from dppeft.peft import PeftConfig

root = tempfile.mkdtemp()
paths = generate_suite(root, {"pretrain": 512, "train": 512, "clean": 64, "other": 64}, words_per_utterance=2, vocab_words=200)

cfg = ExperimentConfig(
    model=ModelConfig(num_layers=2, model_dim=32, ffn_dim=64, num_heads=2, groupnorm_groups=4),
    peft=PeftConfig("bitfit"),
    dp=DpConfig(steps=60, target_epsilon=10.0, delta_inverse_n=True),
    train_data=paths["train"],
    eval_data={"clean": paths["clean"], "other": paths["other"]},
    pretrain_data=paths["pretrain"],
    pretrain_steps=300,
    batch_size=32,
    lr_grid=(3e-3,),
)

ckpt = os.path.join(root, "pre.ckpt")
_, pre = run_pretrain(cfg, out=ckpt)
print(render_report(pre))

# the DP stage only ever sees the private train split
params, report = run_dp_finetune(replace(cfg, base_checkpoint=ckpt))
print(render_report(report))
print("privacy:", report.results["privacy"])
