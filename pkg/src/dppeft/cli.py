"""Command-line entry point: ``dppeft <subcommand>`` or ``python3 -m dppeft``.

Exit status is 0 on success, 1 when a run fails or violates an invariant and 2
on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .accountant import CalibrationError, calibrate_sigma, compute_epsilon
from .checkpoint import CheckpointError, load_checkpoint
from .data import CorpusSpec, DatasetError
from .experiment import (
    SPLITS,
    SWEEP_MULTIPLIERS,
    ExperimentConfig,
    ExperimentError,
    RunReport,
    format_table,
    generate_split,
    generate_suite,
    render_report,
    run_dp_finetune,
    run_evaluate,
    run_pretrain,
    run_sweep,
)
from .peft import PeftConfig


def _emit(report: RunReport, path: str | None, fmt: str) -> None:
    if path:
        report.save(path)
    print(report.to_json() if fmt == "json" else render_report(report), end="" if fmt == "json" else "\n")


def cmd_gen_data(a) -> int:
    if a.suite:
        sizes = {"train": a.num_utterances} if a.num_utterances is not None else None
        paths = generate_suite(a.out, sizes, a.words_per_utterance, a.vocab_words)
        print(json.dumps(paths, indent=2))
        return 0
    spec = CorpusSpec(
        num_utterances=20000 if a.num_utterances is None else a.num_utterances,
        words_per_utterance=a.words_per_utterance,
        vocab_words=a.vocab_words,
        num_voices=a.num_voices,
        seed=SPLITS[a.kind]["seed"] if a.seed is None else a.seed,
        word_seed=a.word_seed,
        zipf=a.zipf,
    )
    spec.validate()
    path = generate_split(a.out, a.kind, spec, a.voice_seed, a.jitter, True if a.random_voices else None)
    print(path)
    return 0


def _load_config(a) -> ExperimentConfig:
    cfg = ExperimentConfig.load(a.config)
    if getattr(a, "seed", None) is not None:
        cfg = replace(cfg, seed=a.seed)
    if getattr(a, "steps", None) is not None:
        cfg = replace(cfg, dp=replace(cfg.dp, steps=a.steps))
    if getattr(a, "method", None):
        cfg = replace(cfg, peft=replace(cfg.peft, method=a.method))
    if getattr(a, "noise_multiplier", None) is not None:
        cfg = replace(cfg, dp=replace(cfg.dp, noise_multiplier=a.noise_multiplier))
    if getattr(a, "no_dp", False):
        cfg = replace(cfg, dp=replace(cfg.dp, dp_enabled=False))
    if getattr(a, "base_checkpoint", None):
        cfg = replace(cfg, base_checkpoint=a.base_checkpoint)
    return cfg


def cmd_pretrain(a) -> int:
    cfg = _load_config(a)
    if a.steps is not None:
        cfg = replace(cfg, pretrain_steps=a.steps)
    _, report = run_pretrain(cfg, out=a.out)
    _emit(report, a.report, a.format)
    return 0


def cmd_finetune(a) -> int:
    _, report = run_dp_finetune(_load_config(a), out=a.out)
    _emit(report, a.report, a.format)
    return 0


def cmd_sweep(a) -> int:
    report = run_sweep(_load_config(a), multipliers=tuple(a.multipliers))
    _emit(report, a.report, a.format)
    return 0


def cmd_calibrate(a) -> int:
    if a.q is None:
        if a.batch_size is None or a.dataset_size is None:
            raise SystemExit("calibrate: give --q or both --batch-size and --dataset-size")
        q = a.batch_size / a.dataset_size
    else:
        q = a.q
    delta = a.delta if a.delta is not None else (1.0 / a.dataset_size if a.dataset_size else 3.52e-6)
    sigma = calibrate_sigma(q, a.steps, a.epsilon, delta)
    spent = compute_epsilon(q, sigma, a.steps, delta)
    out = {"q": q, "steps": a.steps, "delta": delta, "target_epsilon": a.epsilon, "noise_multiplier": sigma, "epsilon": spent.epsilon, "order": spent.order}
    if a.format == "json":
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(format_table(list(out), [list(out.values())]))
    return 0


def cmd_evaluate(a) -> int:
    params, _ = load_checkpoint(a.checkpoint)
    splits = {}
    for item in a.data:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        splits[name] = path
    for p in splits.values():
        if not Path(p).exists():
            raise ExperimentError(f"dataset {p!r} does not exist")
    results = {"splits": run_evaluate(params, splits)}
    report = RunReport("evaluate", {"checkpoint": str(a.checkpoint), "data": splits}, 0, results)
    _emit(report, a.report, a.format)
    return 0


def cmd_report(a) -> int:
    for path in a.reports:
        d = json.loads(Path(path).read_text())
        if len(a.reports) > 1:
            print(f"== {path}")
        print(render_report(d))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dppeft", description="DP fine-tuning of a toy speech recognizer with PEFT methods.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a pseudo-TTS dataset split")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=sorted(SPLITS), default="train")
    g.add_argument("--suite", action="store_true", help="write pretrain/train/clean/other toy splits under --out")
    g.add_argument("--num-utterances", type=int)
    g.add_argument("--words-per-utterance", type=int, default=7)
    g.add_argument("--vocab-words", type=int, default=10000)
    g.add_argument("--num-voices", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.add_argument("--word-seed", type=int, default=17)
    g.add_argument("--zipf", type=float, help="Zipf exponent for frequency-weighted word sampling")
    g.add_argument("--voice-seed", type=int)
    g.add_argument("--jitter", type=float)
    g.add_argument("--random-voices", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def run_args(sp, out_help: str):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--report", help="write the JSON report here")
        sp.add_argument("--format", choices=("table", "json"), default="table")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)

    pt = sub.add_parser("pretrain", help="non-private bias + head training on public synthetic data")
    run_args(pt, "checkpoint path")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="PEFT fine-tuning with DP-SGD")
    run_args(ft, "checkpoint path")
    ft.add_argument("--method", choices=("full", "bitfit", "lora", "rp", "adapter"))
    ft.add_argument("--noise-multiplier", type=float)
    ft.add_argument("--base-checkpoint")
    ft.add_argument("--no-dp", action="store_true")
    ft.set_defaults(func=cmd_finetune)

    sw = sub.add_parser("sweep", help="compute-matched batch-size sweep")
    run_args(sw, "unused")
    sw.add_argument("--method", choices=("full", "bitfit", "lora", "rp", "adapter"))
    sw.add_argument("--base-checkpoint")
    sw.add_argument("--multipliers", type=int, nargs="+", default=list(SWEEP_MULTIPLIERS))
    sw.set_defaults(func=cmd_sweep)

    c = sub.add_parser("calibrate", help="noise multiplier for a privacy budget")
    c.add_argument("--q", type=float)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--dataset-size", type=int)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--epsilon", type=float, default=10.0)
    c.add_argument("--delta", type=float, help="default: 1/dataset-size if given, else 3.52e-6")
    c.add_argument("--format", choices=("table", "json"), default="json")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="greedy-decode WER per split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+", required=True, help="split=path or path")
    e.add_argument("--report")
    e.add_argument("--format", choices=("table", "json"), default="table")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="render saved JSON reports as tables")
    r.add_argument("reports", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ExperimentError, CalibrationError, CheckpointError, DatasetError, ValueError, OSError) as e:
        print(f"dppeft {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
