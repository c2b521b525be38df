"""Differentially private, parameter-efficient fine-tuning of a small CTC
speech recognizer, built on a self-contained numpy autodiff engine."""

from .accountant import PrivacyLedger, PrivacySpent, calibrate_sigma, compute_epsilon, rdp_step, rdp_to_dp
from .ctc import ctc_loss, greedy_decode, wer
from .dpsgd import DpConfig, adam_step, aggregate_and_noise, clip, per_example_gradients, train_step
from .model import ModelConfig, count_params, encode, init_model
from .peft import PeftConfig, apply_peft
from .rng import Rng, gaussian_init

__version__ = "0.1.0"

__all__ = [
    "DpConfig",
    "ModelConfig",
    "PeftConfig",
    "PrivacyLedger",
    "PrivacySpent",
    "Rng",
    "adam_step",
    "aggregate_and_noise",
    "apply_peft",
    "calibrate_sigma",
    "clip",
    "compute_epsilon",
    "count_params",
    "ctc_loss",
    "encode",
    "gaussian_init",
    "greedy_decode",
    "init_model",
    "per_example_gradients",
    "rdp_step",
    "rdp_to_dp",
    "train_step",
    "wer",
]
