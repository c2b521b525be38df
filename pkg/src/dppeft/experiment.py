"""Toy-scale experiment harness: pre-training, DP fine-tuning, batch-size
sweeps and WER evaluation, all driven by one JSON-serializable config.

Every number in a :class:`RunReport` is a deterministic function of the
config and seed. Wall-clock timing is kept out of the canonical report and
written next to it as a separate ``.timing.json`` file, so that repeated runs
produce byte-identical reports.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .accountant import PrivacyLedger, calibrate_sigma
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import WerReport, greedy_decode, wer
from .data import (
    ALPHABET,
    CorpusSpec,
    Dataset,
    Utterance,
    collate,
    decode_ids,
    read_dataset,
    synthesize_corpus,
    write_dataset,
)
from .dpsgd import (
    DpConfig,
    adam_init,
    batch_loss,
    poisson_sample,
    shuffle_batches,
    train_step,
)
from .model import ModelConfig, count_params, encode, init_model
from .params import ParamStore
from .peft import PeftConfig, apply_peft, strip_peft
from .rng import Rng

log = logging.getLogger(__name__)

SWEEP_MULTIPLIERS = (1, 2, 4, 8, 12)
NORM_BINS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)  # in units of the clip bound


class ExperimentError(RuntimeError):
    """A run could not start or violated one of its invariants."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    train_data: str | None = None
    eval_data: dict[str, str] = field(default_factory=dict)  # split name -> dataset dir
    pretrain_data: str | None = None
    base_checkpoint: str | None = None
    lr_grid: tuple[float, ...] = (1e-3,)
    seed: int = 0
    batch_size: int = 64
    eval_every: int = 0  # 0: evaluate only at the end
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    max_chunks: int = 2  # length buckets for non-private batch gradients
    eval_batch: int = 64
    workers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        object.__setattr__(self, "eval_data", dict(self.eval_data))
        if not self.lr_grid:
            raise ValueError("lr_grid must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def check_paths(self, *names: str) -> None:
        for n in names:
            value = getattr(self, n)
            paths = value.values() if isinstance(value, dict) else [value]
            if n == "eval_data" and not value:
                raise ExperimentError("eval_data must name at least one split")
            for p in paths:
                if p is None or not Path(p).exists():
                    raise ExperimentError(f"{n}: path {p!r} does not exist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["peft"] = PeftConfig.from_dict(d.get("peft", {}))
        d["dp"] = DpConfig.from_dict(d.get("dp", {}))
        return cls(**d)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunReport:
    kind: str
    config: dict
    seed: int
    results: dict
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "config": self.config, "results": self.results}

    def to_json(self) -> str:
        """Canonical form: sorted keys, timing excluded."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.write_text(self.to_json())
        path.with_suffix(".timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunReport:
        d = json.loads(Path(path).read_text())
        return cls(d["kind"], d["config"], d["seed"], d["results"])


# ---------------------------------------------------------------------------
# data helpers

# Split recipes. The public (pretrain) corpus uses its own transcript seed and
# voice bank; the sensitive training corpus and the "clean" split share a
# voice bank; "other" renders with fresh random voices and heavier jitter.
SPLITS = {
    "pretrain": {"seed": 1, "voice_seed": 1001, "jitter": 0.1, "random_voices": False},
    "train": {"seed": 2, "voice_seed": 2002, "jitter": 0.1, "random_voices": False},
    "clean": {"seed": 3, "voice_seed": 2002, "jitter": 0.05, "random_voices": False},
    "other": {"seed": 4, "voice_seed": 2002, "jitter": 0.2, "random_voices": True},
}
TOY_SIZES = {"pretrain": 2048, "train": 2048, "clean": 256, "other": 256}
TOY_WORDS_PER_UTTERANCE = 3


def generate_split(
    out: str | os.PathLike,
    kind: str,
    spec: CorpusSpec,
    voice_seed: int | None = None,
    jitter: float | None = None,
    random_voices: bool | None = None,
) -> Path:
    """Synthesize and write one split; unset options take the ``kind`` recipe."""
    recipe = SPLITS[kind]
    voice_seed = recipe["voice_seed"] if voice_seed is None else voice_seed
    jitter = recipe["jitter"] if jitter is None else jitter
    random_voices = recipe["random_voices"] if random_voices is None else random_voices
    utts = synthesize_corpus(spec, voice_seed, jitter, prefix=kind, random_voices=random_voices)
    meta = {"kind": kind, "spec": asdict(spec), "voice_seed": voice_seed, "jitter": jitter, "random_voices": random_voices}
    write_dataset(utts, out, dataset_id=kind, meta=meta)
    return Path(out)


def generate_suite(root: str | os.PathLike, sizes: dict[str, int] | None = None, words_per_utterance: int = TOY_WORDS_PER_UTTERANCE, vocab_words: int = 10000) -> dict[str, str]:
    """All four toy splits under ``root``; returns ``{kind: path}``."""
    root = Path(root)
    sizes = {**TOY_SIZES, **(sizes or {})}
    out = {}
    for kind, recipe in SPLITS.items():
        spec = CorpusSpec(
            num_utterances=sizes[kind],
            words_per_utterance=words_per_utterance,
            vocab_words=vocab_words,
            seed=recipe["seed"],
        )
        out[kind] = str(generate_split(root / kind, kind, spec))
    return out


def load_utterances(path: str | os.PathLike) -> list[Utterance]:
    ds = read_dataset(path)
    return [ds[i] for i in range(len(ds))]


def _check_vocab(params: ParamStore, path: str | os.PathLike) -> None:
    ds = Dataset(path)
    if ds.manifest.vocabulary != list(ALPHABET) or params.config.vocab_size != len(ALPHABET) + 1:
        raise ExperimentError(
            f"vocabulary mismatch: model has {params.config.vocab_size} outputs, "
            f"dataset {path} has {len(ds.manifest.vocabulary)} symbols plus blank"
        )
    if ds.manifest.feature_dim != params.config.feature_dim:
        raise ExperimentError(f"feature_dim mismatch between model and dataset {path}")


def _length_order(utts: list[Utterance]) -> list[int]:
    return sorted(range(len(utts)), key=lambda i: (utts[i].num_frames, i))


def score_logprobs(logp: np.ndarray, out_len, references: list[list[str]]) -> tuple[WerReport, list[str]]:
    """Greedy-decode ``[B, T', V]`` log-probabilities and score against word lists."""
    total = WerReport(0, 0, 0, 0)
    hyps = []
    for row, ref in enumerate(references):
        hyp = decode_ids(greedy_decode(logp[row], int(out_len[row])))
        hyps.append(hyp)
        total = total + wer(ref, hyp.split())
    return total, hyps


def evaluate_utterances(params: ParamStore, utts: list[Utterance], batch: int = 64) -> tuple[WerReport, list[str]]:
    """Greedy-decode every utterance and score against its transcript."""
    if not utts:
        raise ExperimentError("cannot evaluate an empty split")
    order = _length_order(utts)
    hyps: list[str] = [""] * len(utts)
    total = WerReport(0, 0, 0, 0)
    for s in range(0, len(order), batch):
        idx = order[s : s + batch]
        b = collate([utts[i] for i in idx])
        logp, out_len = encode(params, b.features, b.lengths)
        part, h = score_logprobs(logp, out_len, [utts[i].words for i in idx])
        total = total + part
        for i, text in zip(idx, h):
            hyps[i] = text
    return total, hyps


def mean_loss(params: ParamStore, utts: list[Utterance], batch: int = 64) -> float:
    """Mean per-utterance CTC loss (infeasible utterances count as zero)."""
    order = _length_order(utts)
    total = 0.0
    for s in range(0, len(order), batch):
        b = collate([utts[i] for i in order[s : s + batch]])
        loss, _ = batch_loss(params, b)
        total += float(loss.data) * len(b)
    return total / len(utts)


def run_evaluate(params: ParamStore, datasets: dict[str, str], batch: int = 64) -> dict:
    """WER report per split (``{split: WerReport.to_dict()}``)."""
    out = {}
    for split in sorted(datasets):
        _check_vocab(params, datasets[split])
        report, _ = evaluate_utterances(params, load_utterances(datasets[split]), batch)
        out[split] = report.to_dict()
    return out


# ---------------------------------------------------------------------------
# training loop


def _norm_summary(norms: list[float], clip_bound: float) -> dict:
    if not norms:
        return {"count": 0}
    arr = np.asarray(norms)
    edges = [b * clip_bound for b in NORM_BINS] + [math.inf]
    counts = [int(((arr >= lo) & (arr < hi)).sum()) for lo, hi in zip(edges[:-1], edges[1:])]
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p90": float(np.percentile(arr, 90)),
        "max": float(arr.max()),
        "bin_edges_over_clip": list(NORM_BINS),
        "histogram": counts,
    }


def _batches(n: int, batch_size: int, steps: int, sampling: str, rng: Rng):
    if sampling == "poisson":
        q = batch_size / n
        for t in range(steps):
            yield poisson_sample(n, q, rng.child("poisson", t))
    else:
        it = shuffle_batches(n, min(batch_size, n), rng)
        for _ in range(steps):
            yield next(it)


def train(
    params: ParamStore,
    utts: list[Utterance],
    dp: DpConfig,
    lr: float,
    batch_size: int,
    seed: int,
    noise_multiplier: float = 0.0,
    ledger: PrivacyLedger | None = None,
    max_chunks: int = 2,
    workers: int | None = None,
    on_eval=None,
    eval_every: int = 0,
) -> tuple[ParamStore, dict]:
    """Run ``dp.steps`` training steps; returns final params and a history dict."""
    if not utts:
        raise ExperimentError("training set is empty")
    rng = Rng(seed)
    adam = adam_init(params, lr=lr)
    frozen_before = {n: p.value for n, p in params.items() if not p.trainable}
    losses, sizes, infeasible, clipped, norms, evals = [], [], 0, [], [], []
    for step, idx in enumerate(_batches(len(utts), batch_size, dp.steps, dp.sampling, rng.child("sampler"))):
        batch = collate([utts[i] for i in idx]) if len(idx) else None
        stats, params, adam, ledger = train_step(
            params,
            batch,
            dp,
            adam,
            ledger,
            rng.child("noise", step),
            noise_multiplier=noise_multiplier,
            denominator=float(batch_size) if dp.dp_enabled else None,
            workers=workers,
            max_chunks=max_chunks,
        )
        if dp.dp_enabled and stats.grad_norms:
            # the clipped norms are recomputed inside clip(); this is the online bound check
            clipped.append(stats.clipped_fraction)
            norms.extend(stats.grad_norms)
        losses.append(stats.loss)
        sizes.append(stats.batch_size)
        infeasible += stats.infeasible
        if on_eval is not None and eval_every and (step + 1) % eval_every == 0 and step + 1 < dp.steps:
            evals.append({"step": step + 1, **on_eval(params)})
    for n, v in frozen_before.items():
        if not np.array_equal(params.value(n), v):
            raise ExperimentError(f"frozen parameter {n} changed during training")
    history = {
        "loss_curve": losses,
        "batch_sizes": sizes,
        "infeasible_examples": infeasible,
        "clipped_fraction": float(np.mean(clipped)) if clipped else 0.0,
        "grad_norms": _norm_summary(norms, dp.clip_bound),
        "evals": evals,
    }
    return params, history


# ---------------------------------------------------------------------------
# runs


def base_params(config: ExperimentConfig) -> ParamStore:
    """The base model: a checkpoint's base tensors, or a fresh seeded init."""
    if config.base_checkpoint:
        config.check_paths("base_checkpoint")
        params, _ = load_checkpoint(config.base_checkpoint)
        if params.config != config.model:
            raise ExperimentError("base checkpoint's model config differs from the experiment's")
        return strip_peft(params)
    config.model.validate()
    return init_model(config.model, Rng(config.seed).child("init"))


def pretrain_mask(params: ParamStore) -> set[str]:
    """Encoder biases (not normalization biases) plus the output head."""
    return {n for n, p in params.items() if p.kind == "bias"} | {"head.w", "head.b"}


def run_pretrain(config: ExperimentConfig, out: str | os.PathLike | None = None) -> tuple[ParamStore, RunReport]:
    """Non-private training of biases and head on the public synthetic corpus."""
    config.check_paths("pretrain_data")
    t0 = time.perf_counter()
    init = base_params(config)
    params = init.with_mask(pretrain_mask(init))
    utts = load_utterances(config.pretrain_data)
    _check_vocab(params, config.pretrain_data)
    held = utts[-max(1, len(utts) // 10) :]
    train_utts = utts[: len(utts) - len(held)] or utts
    loss0 = mean_loss(params, held)
    dp = replace(config.dp, dp_enabled=False, steps=config.pretrain_steps)
    params, hist = train(params, train_utts, dp, config.pretrain_lr, config.batch_size, config.seed, max_chunks=config.max_chunks)
    loss1 = mean_loss(params, held)
    total, trainable, frac = count_params(params)
    results = {
        "steps": config.pretrain_steps,
        "trainable_names": sorted(pretrain_mask(params)),
        "trainable_params": trainable,
        "total_params": total,
        "trainable_fraction": frac,
        "heldout_loss_initial": loss0,
        "heldout_loss_final": loss1,
        "loss_curve": hist["loss_curve"],
    }
    elapsed = time.perf_counter() - t0
    report = RunReport("pretrain", config.to_dict(), config.seed, results, _timing(elapsed, config.pretrain_steps))
    final = params.with_mask(set(params.names()))  # base stores are stored fully trainable
    if out is not None:
        save_checkpoint(final, out, meta={"kind": "pretrain", "steps": config.pretrain_steps})
    return final, report


def _timing(elapsed: float, steps: int) -> dict:
    return {"wall_clock_s": elapsed, "steps_per_s": steps / elapsed if elapsed > 0 else None}


def resolve_noise(config: ExperimentConfig, n_train: int) -> tuple[float, float, float]:
    """``(q, delta, sigma)`` for the run; sigma is calibrated unless given."""
    dp = config.dp
    q = min(1.0, config.batch_size / n_train)
    delta = dp.delta_for(n_train)
    if not dp.dp_enabled:
        return q, delta, 0.0
    if dp.noise_multiplier is not None:
        return q, delta, float(dp.noise_multiplier)
    return q, delta, calibrate_sigma(q, dp.steps, dp.target_epsilon, delta)


def run_dp_finetune(config: ExperimentConfig, out: str | os.PathLike | None = None) -> tuple[ParamStore, RunReport]:
    """Apply PEFT, train (privately unless disabled) for each lr in the grid,
    evaluate every split and keep the lr with the best final WER on the first
    split in sorted order."""
    config.check_paths("train_data", "eval_data")
    t0 = time.perf_counter()
    base = base_params(config)
    train_utts = load_utterances(config.train_data)
    _check_vocab(base, config.train_data)
    eval_utts = {s: load_utterances(p) for s, p in sorted(config.eval_data.items())}
    for p in config.eval_data.values():
        _check_vocab(base, p)
    n = len(train_utts)
    q, delta, sigma = resolve_noise(config, n)
    dp = config.dp

    params0, peft_report = apply_peft(base, config.peft, Rng(config.seed).child("peft"))

    def evaluate(params):
        return {s: evaluate_utterances(params, u, config.eval_batch)[0].wer for s, u in eval_utts.items()}

    grid, best = [], None
    for k, lr in enumerate(config.lr_grid):
        ledger = PrivacyLedger(q, sigma) if dp.dp_enabled else None
        params, hist = train(
            params0,
            train_utts,
            dp,
            lr,
            config.batch_size,
            config.seed,
            noise_multiplier=sigma,
            ledger=ledger,
            max_chunks=config.max_chunks,
            workers=config.workers,
            on_eval=evaluate,
            eval_every=config.eval_every,
        )
        final = {s: evaluate_utterances(params, u, config.eval_batch)[0].to_dict() for s, u in eval_utts.items()}
        wer_best = {s: min([final[s]["wer"]] + [e[s] for e in hist["evals"]]) for s in final}
        privacy = None
        if dp.dp_enabled:
            spent = ledger.spent(delta)
            privacy = {
                "epsilon": spent.epsilon,
                "delta": delta,
                "order": spent.order,
                "noise_multiplier": sigma,
                "q": q,
                "steps": ledger.steps_taken,
                "target_epsilon": dp.target_epsilon,
            }
        row = {"lr": lr, "wer_final": final, "wer_best": wer_best, "privacy": privacy, **hist}
        grid.append(row)
        key = final[next(iter(final))]["wer"]
        if best is None or key < best[0]:
            best = (key, k, params)

    _, k_best, params = best
    chosen = grid[k_best]
    results = {
        "method": config.peft.method,
        "dp_enabled": dp.dp_enabled,
        "lr": chosen["lr"],
        "wer": {s: {"final": chosen["wer_final"][s]["wer"], "best": chosen["wer_best"][s]} for s in chosen["wer_final"]},
        "wer_detail": chosen["wer_final"],
        "privacy": chosen["privacy"],
        "peft": peft_report.to_dict(),
        "trainable_fraction": peft_report.trainable_fraction,
        "examples_processed": config.batch_size * dp.steps,
        "loss_curve": chosen["loss_curve"],
        "clipped_fraction": chosen["clipped_fraction"],
        "grad_norms": chosen["grad_norms"],
        "infeasible_examples": chosen["infeasible_examples"],
        "evals": chosen["evals"],
        "lr_grid": [{"lr": r["lr"], "wer": {s: v["wer"] for s, v in r["wer_final"].items()}} for r in grid],
    }
    elapsed = time.perf_counter() - t0
    report = RunReport("finetune", config.to_dict(), config.seed, results, _timing(elapsed, dp.steps * len(grid)))
    check_report(report)
    if out is not None:
        save_checkpoint(params, out, meta={"kind": "finetune", "method": config.peft.method})
    return params, report


def check_report(report: RunReport, tol: float = 1e-3) -> None:
    """Budget honesty: a private run never reports more than target + tol."""
    priv = report.results.get("privacy")
    if priv and priv["epsilon"] > priv["target_epsilon"] + tol and report.config["dp"]["noise_multiplier"] is None:
        raise ExperimentError(f"epsilon {priv['epsilon']:.4f} exceeds target {priv['target_epsilon']}")


def run_sweep(config: ExperimentConfig, multipliers=SWEEP_MULTIPLIERS) -> RunReport:
    """Compute-matched batch-size sweep: batch x m, steps // m, sigma re-calibrated.

    A noise multiplier fixed in the base config is ignored so every row meets
    the same budget.
    """
    t0 = time.perf_counter()
    rows, reports = [], []
    for m in multipliers:
        steps = config.dp.steps // m
        if steps == 0:
            log.warning("multiplier %d leaves zero steps; skipped", m)
            continue
        cfg = replace(config, batch_size=config.batch_size * m, dp=replace(config.dp, steps=steps, noise_multiplier=None))
        _, rep = run_dp_finetune(cfg)
        res = rep.results
        priv = res["privacy"] or {}
        rows.append(
            {
                "method": res["method"],
                "multiplier": m,
                "batch_size": cfg.batch_size,
                "steps": steps,
                "examples_processed": cfg.batch_size * steps,
                "noise_multiplier": priv.get("noise_multiplier"),
                "epsilon": priv.get("epsilon"),
                "lr": res["lr"],
                "wer": {s: v["final"] for s, v in res["wer"].items()},
            }
        )
        reports.append(rep.to_dict())
    if not rows:
        raise ExperimentError("every multiplier was skipped")
    first = next(iter(rows[0]["wer"]))
    optimal = min(rows, key=lambda r: (r["wer"][first], r["multiplier"]))["multiplier"]
    results = {"rows": rows, "optimal_multiplier": optimal, "selection_split": first, "runs": reports}
    return RunReport("sweep", config.to_dict(), config.seed, results, _timing(time.perf_counter() - t0, 0))


# ---------------------------------------------------------------------------
# text rendering


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def render_report(report: RunReport | dict) -> str:
    d = report.to_dict() if isinstance(report, RunReport) else report
    res = d["results"]
    kind = d["kind"]
    if kind == "sweep":
        splits = list(res["rows"][0]["wer"])
        header = ["method", "mult", "batch", "steps", "examples", "sigma", "epsilon"] + [f"wer_{s}" for s in splits]
        rows = [
            [r["method"], r["multiplier"], r["batch_size"], r["steps"], r["examples_processed"], r["noise_multiplier"], r["epsilon"]]
            + [r["wer"][s] for s in splits]
            for r in res["rows"]
        ]
        return format_table(header, rows) + f"\noptimal multiplier: {res['optimal_multiplier']}"
    if kind == "finetune":
        priv = res["privacy"] or {}
        header = ["method", "dp", "lr", "trainable", "epsilon", "delta", "sigma"] + [f"wer_{s}" for s in res["wer"]]
        row = [res["method"], res["dp_enabled"], res["lr"], res["trainable_fraction"], priv.get("epsilon"), priv.get("delta"), priv.get("noise_multiplier")]
        row += [v["final"] for v in res["wer"].values()]
        return format_table(header, [row])
    if kind == "pretrain":
        header = ["steps", "trainable", "fraction", "heldout_loss_0", "heldout_loss_T"]
        row = [res["steps"], res["trainable_params"], res["trainable_fraction"], res["heldout_loss_initial"], res["heldout_loss_final"]]
        return format_table(header, [row])
    if kind == "evaluate":
        header = ["split", "S", "I", "D", "words", "wer"]
        rows = [[s, v["substitutions"], v["insertions"], v["deletions"], v["ref_words"], v["wer"]] for s, v in res["splits"].items()]
        return format_table(header, rows)
    return json.dumps(res, indent=2, sort_keys=True)
