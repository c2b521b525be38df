"""Conformer-lite encoder with per-frame group normalization and a linear CTC head.

Block layout (pre-norm, residual)::

    h = h + MHSA(GN(h))
    h = h + DWConv(GN(h))          # only when conv_module_enabled
    h = h + FFN(GN(h))             # FFN = W2 · swish(W1 · x); adapter appended if installed
    logits = head(GN(h))

Group normalization computes statistics per frame over channel groups, so no
statistic ever spans two examples (or two frames). Batches are padded; padded
key frames are masked out of attention and zeroed before the convolution, so
the valid outputs of example ``i`` depend on example ``i`` alone.

Parameter count for a config with ``L`` layers, width ``D``, FFN width ``F``,
input ``F_in`` features stacked ``s`` at a time, vocabulary ``V`` and conv
kernel ``K``::

    total = (s*F_in*D + D)                         # subsampling projection
          + L * (4*D*D + 4*D                       # q, k, v, o projections
                 + 2*D*F + F + D                   # FFN
                 + 2*D + 2*D                       # two group norms
                 + [K*D + D + 2*D])                # conv module, if enabled
          + 2*D                                    # final group norm
          + D*V + V                                # CTC head

See :func:`expected_param_count`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import Param, ParamStore
from .rng import Rng, gaussian_init

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    groupnorm_groups: int = 8
    conv_module_enabled: bool = False
    conv_kernel: int = 7
    feature_dim: int = 16
    frame_stack: int = 2
    vocab_size: int = 28

    def validate(self) -> None:
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.model_dim % self.groupnorm_groups:
            raise ValueError("model_dim must be divisible by groupnorm_groups")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (blank + one label)")
        if min(self.num_layers, self.model_dim, self.ffn_dim, self.feature_dim, self.frame_stack) < 1:
            raise ValueError("sizes must be positive")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def expected_param_count(cfg: ModelConfig) -> int:
    d, f, v = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    if cfg.conv_module_enabled:
        per_layer += cfg.conv_kernel * d + d + 2 * d
    return cfg.frame_stack * cfg.feature_dim * d + d + cfg.num_layers * per_layer + 2 * d + d * v + v


def _layer_shapes(cfg: ModelConfig, i: int) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.model_dim, cfg.ffn_dim
    p = f"layers.{i}"
    shapes = [
        (f"{p}.attn_norm.scale", (d,), "norm_scale"),
        (f"{p}.attn_norm.bias", (d,), "norm_bias"),
    ]
    for proj in "qkvo":
        shapes += [(f"{p}.attn.w{proj}", (d, d), "weight"), (f"{p}.attn.b{proj}", (d,), "bias")]
    if cfg.conv_module_enabled:
        shapes += [
            (f"{p}.conv_norm.scale", (d,), "norm_scale"),
            (f"{p}.conv_norm.bias", (d,), "norm_bias"),
            (f"{p}.conv.w", (cfg.conv_kernel, d), "weight"),
            (f"{p}.conv.b", (d,), "bias"),
        ]
    shapes += [
        (f"{p}.ffn_norm.scale", (d,), "norm_scale"),
        (f"{p}.ffn_norm.bias", (d,), "norm_bias"),
        (f"{p}.ffn.w1", (d, f), "weight"),
        (f"{p}.ffn.b1", (f,), "bias"),
        (f"{p}.ffn.w2", (f, d), "weight"),
        (f"{p}.ffn.b2", (d,), "bias"),
    ]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d = cfg.model_dim
    shapes = [
        ("subsample.w", (cfg.frame_stack * cfg.feature_dim, d), "weight"),
        ("subsample.b", (d,), "bias"),
    ]
    for i in range(cfg.num_layers):
        shapes += _layer_shapes(cfg, i)
    shapes += [
        ("final_norm.scale", (d,), "norm_scale"),
        ("final_norm.bias", (d,), "norm_bias"),
        ("head.w", (d, cfg.vocab_size), "weight"),
        ("head.b", (cfg.vocab_size,), "bias"),
    ]
    return shapes


def init_model(config: ModelConfig, rng: Rng) -> ParamStore:
    """Fresh, fully trainable parameters; biases zero, norm scales one."""
    config.validate()
    store = ParamStore(config)
    for name, shape, kind in param_shapes(config):
        if kind == "weight":
            # fan-in is the leading axis for both matrices and depthwise kernels
            value = gaussian_init(shape, 1.0 / math.sqrt(shape[0]), rng.child(name), dtype=np.float32)
        elif kind == "norm_scale":
            value = np.ones(shape, np.float32)
        else:
            value = np.zeros(shape, np.float32)
        store.add(name, Param(value, kind, trainable=True))
    return store


def count_params(params: ParamStore) -> tuple[int, int, float]:
    """``(total, trainable, trainable / total)`` as exact element counts."""
    total = trainable = 0
    for _, p in params.items():
        total += p.value.size
        if p.trainable:
            trainable += p.value.size
    return total, trainable, (trainable / total if total else 0.0)


# ---------------------------------------------------------------------------
# forward pass


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : dim // 2])
    return out


def output_lengths(lengths, frame_stack: int) -> np.ndarray:
    return np.asarray(lengths, dtype=np.int64) // frame_stack


def leaves(params: ParamStore, with_grad: bool = True) -> dict[str, Tensor]:
    """Wrap each parameter as a leaf; trainable ones require grad if ``with_grad``."""
    return {
        name: Tensor(p.value, requires_grad=with_grad and p.trainable, name=name)
        for name, p in params.items()
    }


def _linear(p: dict[str, Tensor], x: Tensor, w: str, b: str | None, lora_scale: float) -> Tensor:
    from .peft import lora_forward

    if w + ".lora_a" in p:
        y = lora_forward(p[w], p[w + ".lora_a"], p[w + ".lora_b"], lora_scale, x)
    else:
        y = x @ p[w]
    if b is not None:
        y = ad.bias_add(y, p[b])
    return y


def _group_norm(p: dict[str, Tensor], x: Tensor, prefix: str, groups: int) -> Tensor:
    b, t, d = x.shape
    z = ad.normalize(x.reshape(b, t, groups, d // groups), axis=-1)
    z = z.reshape(b, t, d)
    return ad.bias_add(ad.scale_channels(z, p[prefix + ".scale"]), p[prefix + ".bias"])


def _attention(p, x: Tensor, prefix: str, cfg: ModelConfig, key_mask: Tensor, lora_scale: float) -> Tensor:
    b, t, d = x.shape
    h = cfg.num_heads
    dh = d // h
    q = _linear(p, x, f"{prefix}.wq", f"{prefix}.bq", lora_scale)
    k = _linear(p, x, f"{prefix}.wk", f"{prefix}.bk", lora_scale)
    v = _linear(p, x, f"{prefix}.wv", f"{prefix}.bv", lora_scale)
    q = q.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, t, h, dh).transpose(0, 2, 3, 1)
    v = v.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    scores = ad.scale(q @ k, 1.0 / math.sqrt(dh)) + key_mask
    att = ad.softmax(scores, axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return _linear(p, ctx, f"{prefix}.wo", f"{prefix}.bo", lora_scale)


def _ffn(p, x: Tensor, prefix: str, lora_scale: float) -> Tensor:
    hdn = ad.swish(_linear(p, x, f"{prefix}.w1", f"{prefix}.b1", lora_scale))
    return _linear(p, hdn, f"{prefix}.w2", f"{prefix}.b2", lora_scale)


def _adapter(p, x: Tensor, prefix: str) -> Tensor:
    z = ad.swish(ad.bias_add(x @ p[prefix + ".down_w"], p[prefix + ".down_b"]))
    return x + ad.bias_add(z @ p[prefix + ".up_w"], p[prefix + ".up_b"])


def forward_logprobs(
    params: ParamStore,
    features: np.ndarray,
    lengths,
    p: dict[str, Tensor] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Differentiable forward pass: ``(log_probs [B, T', V], output lengths)``."""
    cfg: ModelConfig = params.config
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError(f"features must be [B, T, F], got shape {features.shape}")
    bsz, t, f = features.shape
    if f != cfg.feature_dim:
        raise ValueError(f"feature dim {f} does not match model feature_dim {cfg.feature_dim}")
    fs = cfg.frame_stack
    if t < fs:
        raise ValueError(f"need at least frame_stack={fs} frames, got {t}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (bsz,) or (lengths > t).any():
        raise ValueError("lengths must have one entry per example, each <= padded length")
    if p is None:
        p = leaves(params)
    lora_scale = getattr(params.peft, "lora_scale", 1.0) if params.peft is not None else 1.0
    d = cfg.model_dim
    tp = t // fs
    out_len = output_lengths(lengths, fs)

    x = Tensor(features[:, : tp * fs].reshape(bsz, tp, fs * f))
    h = _linear(p, x, "subsample.w", "subsample.b", lora_scale)
    pos = np.broadcast_to(sinusoidal_positions(tp, d), (bsz, tp, d))
    h = h + ad.constant(pos)

    valid = np.arange(tp)[None, :] < out_len[:, None]  # [B, T']
    key_mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
    key_mask = ad.constant(np.broadcast_to(key_mask, (bsz, cfg.num_heads, tp, tp)))
    frame_mask = None
    if cfg.conv_module_enabled:
        frame_mask = ad.constant(np.broadcast_to(valid[:, :, None], (bsz, tp, d)))

    g = cfg.groupnorm_groups
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        h = h + _attention(p, _group_norm(p, h, f"{pre}.attn_norm", g), f"{pre}.attn", cfg, key_mask, lora_scale)
        if cfg.conv_module_enabled:
            z = _group_norm(p, h, f"{pre}.conv_norm", g) * frame_mask
            z = ad.swish(ad.bias_add(ad.depthwise_conv1d(z, p[f"{pre}.conv.w"]), p[f"{pre}.conv.b"]))
            h = h + z
        ff = _ffn(p, _group_norm(p, h, f"{pre}.ffn_norm", g), f"{pre}.ffn", lora_scale)
        if f"{pre}.adapter.down_w" in p:
            ff = _adapter(p, ff, f"{pre}.adapter")
        h = h + ff
    h = _group_norm(p, h, "final_norm", g)
    logits = _linear(p, h, "head.w", "head.b", lora_scale)
    return ad.log_softmax(logits, axis=-1), out_len


def encode(params: ParamStore, features: np.ndarray, lengths) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities ``[B, T', V]`` and output lengths ``T' = T // frame_stack``."""
    logp, out_len = forward_logprobs(params, features, lengths, p=leaves(params, with_grad=False))
    return logp.data, out_len
