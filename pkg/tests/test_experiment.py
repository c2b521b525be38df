import json
from dataclasses import replace

import numpy as np
import pytest

from dppeft.checkpoint import load_checkpoint
from dppeft.data import encode_text
from dppeft.dpsgd import DpConfig
from dppeft.experiment import (
    ExperimentConfig,
    ExperimentError,
    RunReport,
    base_params,
    evaluate_utterances,
    generate_suite,
    load_utterances,
    render_report,
    run_dp_finetune,
    run_evaluate,
    run_pretrain,
    run_sweep,
    score_logprobs,
)
from dppeft.model import ModelConfig, init_model
from dppeft.peft import PeftConfig
from dppeft.rng import Rng

from cases import TINY


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    sizes = {"pretrain": 48, "train": 48, "clean": 12, "other": 12}
    return generate_suite(root, sizes, words_per_utterance=2, vocab_words=60)


def _config(suite, **kw):
    base = dict(
        model=TINY,
        peft=PeftConfig("bitfit"),
        dp=DpConfig(steps=6, delta_inverse_n=True),
        train_data=suite["train"],
        eval_data={"clean": suite["clean"], "other": suite["other"]},
        pretrain_data=suite["pretrain"],
        batch_size=8,
        pretrain_steps=4,
        lr_grid=(3e-3,),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_json_round_trip(tmp_path, suite):
    cfg = _config(suite, lr_grid=(1e-3, 3e-3))
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_pretrain_mask_and_zero_steps(tmp_path, suite):
    cfg = _config(suite, pretrain_steps=0)
    params, rep = run_pretrain(cfg, out=tmp_path / "p.ckpt")
    assert set(rep.results["trainable_names"]) == {
        n for n, p in params.items() if p.kind == "bias"
    } | {"head.w", "head.b"}
    loaded, _ = load_checkpoint(tmp_path / "p.ckpt")
    assert loaded.equals(init_model(TINY, Rng(cfg.seed).child("init")))


def test_pretrain_reduces_heldout_loss(suite):
    _, rep = run_pretrain(_config(suite, pretrain_steps=25, pretrain_lr=1e-2))
    assert rep.results["heldout_loss_final"] < rep.results["heldout_loss_initial"]


def test_finetune_reproducible_and_within_budget(suite):
    cfg = _config(suite)
    _, a = run_dp_finetune(cfg)
    _, b = run_dp_finetune(cfg)
    assert a.to_json() == b.to_json()
    priv = a.results["privacy"]
    assert priv["epsilon"] <= 10.0 + 1e-3 and abs(priv["epsilon"] - 10.0) < 0.05
    assert priv["delta"] == 1 / 48
    assert a.results["method"] == "bitfit"
    assert len(a.results["loss_curve"]) == 6
    assert "wall_clock_s" in a.timing and "wall_clock_s" not in a.to_json()


def test_finetune_without_dp_has_no_privacy_entry(suite):
    _, rep = run_dp_finetune(_config(suite, dp=DpConfig(steps=3, dp_enabled=False), peft=PeftConfig("full")))
    assert rep.results["privacy"] is None
    assert rep.results["trainable_fraction"] == 1.0


def test_finetune_lr_grid_reported(suite):
    _, rep = run_dp_finetune(_config(suite, lr_grid=(1e-3, 1e-2), dp=DpConfig(steps=3, delta_inverse_n=True)))
    assert [r["lr"] for r in rep.results["lr_grid"]] == [1e-3, 1e-2]
    assert rep.results["lr"] in (1e-3, 1e-2)


def test_finetune_from_checkpoint(tmp_path, suite):
    cfg = _config(suite)
    pre, _ = run_pretrain(cfg, out=tmp_path / "p.ckpt")
    assert base_params(replace(cfg, base_checkpoint=str(tmp_path / "p.ckpt"))).equals(pre)
    _, rep = run_dp_finetune(replace(cfg, base_checkpoint=str(tmp_path / "p.ckpt"), peft=PeftConfig("lora", rank=2)))
    assert rep.results["peft"]["method"] == "lora"


def test_missing_paths(suite):
    with pytest.raises(ExperimentError, match="does not exist"):
        run_dp_finetune(_config(suite, train_data="/nonexistent"))
    with pytest.raises(ExperimentError):
        run_pretrain(_config(suite, pretrain_data=None))


def test_oracle_logits_give_zero_wer():
    refs = [["abc", "de"], ["fg"]]
    logp = np.full((2, 12, 28), -30.0)
    for row, ref in enumerate(refs):
        ids = encode_text(" ".join(ref))
        for t, k in enumerate(ids):
            logp[row, 2 * t, k] = 0.0
            logp[row, 2 * t + 1, 0] = 0.0
    rep, hyps = score_logprobs(logp, [12, 12], refs)
    assert rep.errors == 0 and hyps == ["abc de", "fg"]


def test_untrained_model_near_chance(suite):
    params = init_model(TINY, Rng(0))
    rep, _ = evaluate_utterances(params, load_utterances(suite["clean"]))
    assert rep.wer >= 0.9
    again = run_evaluate(params, {"clean": suite["clean"]})
    assert again == run_evaluate(params, {"clean": suite["clean"]})


def test_vocab_mismatch(suite):
    params = init_model(replace(TINY, vocab_size=10), Rng(0))
    with pytest.raises(ExperimentError, match="vocabulary"):
        run_evaluate(params, {"clean": suite["clean"]})


def test_sweep_structure(suite):
    cfg = _config(suite, dp=DpConfig(steps=10, delta_inverse_n=True), batch_size=2)
    rep = run_sweep(cfg, multipliers=(1, 2, 4, 8, 12))
    rows = rep.results["rows"]
    assert [r["multiplier"] for r in rows] == [1, 2, 4, 8]  # 10 // 12 == 0 is skipped
    for r in rows:
        assert abs(r["epsilon"] - 10.0) <= 0.05
        assert r["steps"] == 10 // r["multiplier"]
        assert r["examples_processed"] == 2 * r["multiplier"] * (10 // r["multiplier"])
    _, base = run_dp_finetune(cfg)
    assert rep.results["runs"][0] == base.to_dict()
    text = render_report(rep)
    assert "optimal multiplier" in text


def test_report_save_and_load(tmp_path, suite):
    _, rep = run_dp_finetune(_config(suite, dp=DpConfig(steps=2, delta_inverse_n=True)))
    rep.save(tmp_path / "r.json")
    assert (tmp_path / "r.timing.json").exists()
    back = RunReport.load(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
    assert "bitfit" in render_report(json.loads((tmp_path / "r.json").read_text()))
