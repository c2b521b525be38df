import numpy as np
import pytest

from dppeft import autodiff as ad
from dppeft.data import collate
from dppeft.dpsgd import batch_loss
from dppeft.model import ModelConfig, count_params, init_model
from dppeft.peft import PeftConfig, apply_peft, lora_forward, strip_peft, trainable_parameters
from dppeft.rng import Rng

from cases import TINY, tiny_corpus


@pytest.fixture(scope="module")
def base():
    return init_model(TINY, Rng(0))


def _eval_loss(params, batch):
    loss, _ = batch_loss(params, batch)
    return float(loss.data)


@pytest.mark.parametrize("method", ["lora", "rp", "adapter"])
@pytest.mark.parametrize("placement", ["ffn", "attention"])
def test_identity_at_init(base, method, placement):
    batch = collate(tiny_corpus(4))
    params, _ = apply_peft(base, PeftConfig(method, rank=2, placement=placement), Rng(1))
    assert abs(_eval_loss(params, batch) - _eval_loss(base, batch)) <= 1e-7


def test_rp_half_of_lora(base):
    for placement in ("ffn", "attention"):
        _, lora = apply_peft(base, PeftConfig("lora", rank=2, placement=placement), Rng(1))
        _, rp = apply_peft(base, PeftConfig("rp", rank=2, placement=placement), Rng(1))
        assert 2 * rp.added_trainable == lora.added_trainable
        assert rp.added_params == lora.added_params


def test_bitfit_excludes_norm_biases(base):
    params, _ = apply_peft(base, PeftConfig("bitfit"), Rng(1))
    kinds = {params[n].kind for n in params.trainable_names()} - {"weight"}
    assert kinds == {"bias"}
    assert set(params.trainable_names()) - {n for n in params.names() if params[n].kind == "bias"} == {"head.w"}
    unfrozen, _ = apply_peft(base, PeftConfig("bitfit", freeze_norm_bias=False), Rng(1))
    assert any(unfrozen[n].kind == "norm_bias" for n in unfrozen.trainable_names())


def test_full_trains_everything(base):
    params, rep = apply_peft(base, PeftConfig("full"), Rng(1))
    assert rep.trainable_fraction == 1.0 and rep.added_params == 0


def test_lora_rank_too_large(base):
    with pytest.raises(ValueError, match="rank"):
        apply_peft(base, PeftConfig("lora", rank=TINY.model_dim + 1), Rng(1))


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown PEFT method"):
        PeftConfig("prefix")


def test_apply_twice_rejected(base):
    params, _ = apply_peft(base, PeftConfig("lora", rank=2), Rng(1))
    with pytest.raises(ValueError):
        apply_peft(params, PeftConfig("lora", rank=2), Rng(1))
    assert strip_peft(params).equals(base)


def test_lora_zero_b_is_identity():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 6))
    x = rng.normal(size=(3, 8))
    a = rng.normal(size=(8, 2))
    assert np.array_equal(lora_forward(w, a, np.zeros((2, 6)), 1.0, x), x @ w)


def test_lora_rank_one_outer_product():
    rng = np.random.default_rng(1)
    w, x = rng.normal(size=(4, 5)), rng.normal(size=(2, 4))
    a, b = rng.normal(size=(4, 1)), rng.normal(size=(1, 5))
    np.testing.assert_allclose(lora_forward(w, a, b, 1.0, x), x @ (w + a @ b), atol=1e-12)
    with ad.precision(np.float64):
        t = lora_forward(*(ad.Tensor(v) for v in (w, a, b)), 1.0, ad.Tensor(x))
    np.testing.assert_allclose(t.data, x @ (w + a @ b), atol=1e-12)


def test_lora_init_sigma(base):
    cfg = ModelConfig()
    params, _ = apply_peft(init_model(cfg, Rng(0)), PeftConfig("lora", rank=8), Rng(2))
    a = np.concatenate([params.value(n).ravel() for n in params.names() if n.endswith("lora_a")])
    assert abs(a.std() / 0.4 - 1) < 0.05
    assert PeftConfig("rp").sigma == 0.3


def test_adapter_parameter_count(base):
    params, rep = apply_peft(base, PeftConfig("adapter", bottleneck=3), Rng(1))
    d = TINY.model_dim
    assert rep.added_params == TINY.num_layers * (d * 3 + 3 + 3 * d + d)
    assert rep.added_trainable == rep.added_params


def test_trainable_counts_monotone_at_attention_placement():
    params = init_model(ModelConfig(), Rng(0))
    r = 8
    counts = {
        m: apply_peft(params, PeftConfig(m, rank=r, placement="attention", bottleneck=2 * r), Rng(1))[1].trainable_params
        for m in ("bitfit", "rp", "lora", "adapter")
    }
    assert counts["bitfit"] < counts["rp"] < counts["lora"] <= counts["adapter"]


def test_trainable_parameters_iterates_mask(base):
    params, _ = apply_peft(base, PeftConfig("rp", rank=2), Rng(1))
    names = [n for n, _ in trainable_parameters(params)]
    assert names == params.trainable_names()
    assert all(n.endswith("lora_b") or n.startswith("head.") for n in names)
    assert count_params(params)[1] == sum(params.value(n).size for n in names)
