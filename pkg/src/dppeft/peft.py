"""Parameter-efficient fine-tuning: Full, BitFit, LoRA, RP and Adapter.

``apply_peft`` takes a base :class:`ParamStore`, installs any new parameters
and returns a store whose trainable mask selects exactly what the optimizer
may touch. Conventions follow row-vector activations: a linear map is
``y = x @ W`` with ``W: [d_in, d_out]``, so the low-rank factors are stored as
``A: [d_in, r]`` (downscale) and ``B: [r, d_out]`` (upscale).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import Param, ParamStore
from .rng import Rng, gaussian_init

METHODS = ("full", "bitfit", "lora", "rp", "adapter")
PLACEMENTS = ("ffn", "attention")
DEFAULT_INIT_SIGMA = {"lora": 0.4, "rp": 0.3}
HEAD_NAMES = ("head.w", "head.b")


@dataclass(frozen=True)
class PeftConfig:
    method: str = "full"
    rank: int = 4
    placement: str = "ffn"
    init_sigma: float | None = None  # None -> per-method default
    lora_scale: float = 1.0
    bottleneck: int = 8
    freeze_norm_bias: bool = True
    decoder_head_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.lower())
        object.__setattr__(self, "placement", self.placement.lower())
        if self.method not in METHODS:
            raise ValueError(f"unknown PEFT method {self.method!r}; expected one of {METHODS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.rank < 1 or self.bottleneck < 1:
            raise ValueError("rank and bottleneck must be >= 1")
        if self.init_sigma is not None and self.init_sigma < 0:
            raise ValueError("init_sigma must be non-negative")

    @property
    def sigma(self) -> float:
        if self.init_sigma is not None:
            return self.init_sigma
        return DEFAULT_INIT_SIGMA.get(self.method, 0.4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PeftConfig:
        return cls(**d)


@dataclass(frozen=True)
class PeftReport:
    method: str
    added_params: int
    added_trainable: int
    trainable_params: int
    total_params: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_fraction"] = self.trainable_fraction
        return d


def lora_targets(params: ParamStore, placement: str) -> list[str]:
    """Weight names receiving low-rank factors for ``placement``."""
    cfg = params.config
    out = []
    for i in range(cfg.num_layers):
        if placement == "ffn":
            out += [f"layers.{i}.ffn.w1", f"layers.{i}.ffn.w2"]
        else:
            out += [f"layers.{i}.attn.wq", f"layers.{i}.attn.wv"]
    return out


def lora_forward(w, a, b, scale: float, x):
    """``x @ W + scale * (x @ A) @ B``.

    Works on :class:`Tensor` (differentiable) or plain arrays.
    """
    if isinstance(x, Tensor):
        base = x @ w
        if scale == 0:
            return base
        return base + ad.scale((x @ a) @ b, scale)
    x, w, a, b = (np.asarray(v) for v in (x, w, a, b))
    if a.shape[0] != w.shape[0] or b.shape[1] != w.shape[1] or a.shape[1] != b.shape[0]:
        raise ad.ShapeError(f"LoRA factors {a.shape}, {b.shape} do not fit weight {w.shape}")
    return x @ w + scale * ((x @ a) @ b)


def _is_base(params: ParamStore) -> bool:
    return not any(p.kind == "peft" for _, p in params.items())


def apply_peft(params: ParamStore, cfg: PeftConfig, rng: Rng) -> tuple[ParamStore, PeftReport]:
    """Install ``cfg`` on a base model; returns the new store and a count report."""
    if not _is_base(params):
        raise ValueError("apply_peft expects a base model without PEFT parameters")
    store = ParamStore(params.config, {n: Param(p.value, p.kind, False) for n, p in params.items()}, cfg)
    added: list[str] = []
    trainable: set[str] = set()
    method = cfg.method

    if method == "full":
        trainable = set(store.names())
    elif method == "bitfit":
        kinds = {"bias"} if cfg.freeze_norm_bias else {"bias", "norm_bias"}
        trainable = {n for n, p in store.items() if p.kind in kinds}
    elif method in ("lora", "rp"):
        for target in lora_targets(store, cfg.placement):
            d_in, d_out = store.value(target).shape
            if cfg.rank > min(d_in, d_out):
                raise ValueError(f"rank {cfg.rank} exceeds dimensions of {target} {d_in}x{d_out}")
            a = gaussian_init((d_in, cfg.rank), cfg.sigma, rng.child(target, "lora_a"), dtype=np.float32)
            b = np.zeros((cfg.rank, d_out), np.float32)
            store.add(target + ".lora_a", Param(a, "peft", False))
            store.add(target + ".lora_b", Param(b, "peft", False))
            added += [target + ".lora_a", target + ".lora_b"]
            trainable.add(target + ".lora_b")
            if method == "lora":
                trainable.add(target + ".lora_a")
    elif method == "adapter":
        d = store.config.model_dim
        k = cfg.bottleneck
        for i in range(store.config.num_layers):
            pre = f"layers.{i}.adapter"
            down = gaussian_init((d, k), 1.0 / np.sqrt(d), rng.child(pre, "down"), dtype=np.float32)
            for name, value in (
                (".down_w", down),
                (".down_b", np.zeros(k, np.float32)),
                (".up_w", np.zeros((k, d), np.float32)),
                (".up_b", np.zeros(d, np.float32)),
            ):
                store.add(pre + name, Param(value, "peft", False))
                added.append(pre + name)
        trainable = set(added)

    if method != "full" and cfg.decoder_head_trainable:
        trainable |= set(HEAD_NAMES)
    store = store.with_mask(trainable, peft=cfg)

    total = sum(p.value.size for _, p in store.items())
    n_trainable = sum(p.value.size for _, p in store.items() if p.trainable)
    n_added = sum(store.value(n).size for n in added)
    n_added_trainable = sum(store.value(n).size for n in added if store[n].trainable)
    return store, PeftReport(method, n_added, n_added_trainable, n_trainable, total)


def trainable_parameters(params: ParamStore) -> Iterator[tuple[str, np.ndarray]]:
    """The tensors DP-SGD updates, in store order."""
    for name, p in params.items():
        if p.trainable:
            yield name, p.value


def strip_peft(params: ParamStore) -> ParamStore:
    """Base parameters only, all marked trainable (the inverse of a fresh ``apply_peft``)."""
    entries = {n: Param(p.value, p.kind, True) for n, p in params.items() if p.kind != "peft"}
    return ParamStore(params.config, entries, None)


def with_method(cfg: PeftConfig, method: str) -> PeftConfig:
    return replace(cfg, method=method)
