"""Command-line entry point: ``eeg2text <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training/numeric failure.
Set ``EEG2TEXT_LOG`` to ``error`` (default), ``info`` or ``debug``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from eeg2text import autodiff as ad
from eeg2text.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from eeg2text.data import SPECIAL_TOKENS, CorpusError, SynthConfig, load_corpus, save_corpus, synth_corpus
from eeg2text.evaluation import MetricsReport, VocabMismatchError, case_report, evaluate, format_table
from eeg2text.masking import STRATEGIES
from eeg2text.models import INPUT_MODES, EEG2Text, ModelConfig
from eeg2text.regions import default_partition, load_partition, validate_partition
from eeg2text.training import (
    PRECISIONS, STAGE_DEFAULTS, VIEW_STRATEGIES, TrainConfig, TrainingError, finetune, load_state,
    model_from_checkpoint, pretrain, pretrain_config_for,
)

log = logging.getLogger("eeg2text")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eeg2text", description="EEG-to-text decoding pipeline.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="JSON config; flags override its values")
        sp.add_argument("--threads", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic corpus")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)

    for verb in ("pretrain", "train"):
        sp = sub.add_parser(verb, help="masked pre-training" if verb == "pretrain" else "fine-tune text decoding")
        common(sp)
        sp.add_argument("--corpus", type=Path, action="append", required=True)
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--precision", choices=tuple(PRECISIONS))
        sp.add_argument("--stage", choices=tuple(STAGE_DEFAULTS))
        sp.add_argument("--input-mode", choices=INPUT_MODES)
        if verb == "pretrain":
            sp.add_argument("--mask-strategy", choices=STRATEGIES)
            sp.add_argument("--mask-ratio", type=float)
        else:
            sp.add_argument("--init-ckpt", type=Path, help="pre-trained checkpoint to initialise from")
            sp.add_argument("--ckpt", type=Path, help="checkpoint to resume from")
            sp.add_argument("--view-strategy", choices=VIEW_STRATEGIES)
            sp.add_argument("--partition", help="'default' or a partition JSON file (enables multi-view)")

    for verb in ("eval", "decode"):
        sp = sub.add_parser(verb, help="score a checkpoint" if verb == "eval" else "print ground truth vs output")
        common(sp, seed=False)
        sp.add_argument("--ckpt", type=Path, required=True)
        sp.add_argument("--corpus", type=Path, action="append", required=True)
        sp.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
        sp.add_argument("--beam-width", type=int, default=4)
        sp.add_argument("--out", type=Path)
        if verb == "decode":
            sp.add_argument("--indices", help="comma-separated sentence indices (default: all)")

    sp = sub.add_parser("inspect", help="validate a corpus, checkpoint or partition")
    sp.add_argument("path", help="corpus directory, checkpoint file, partition JSON or 'default'")

    sp = sub.add_parser("report", help="tabulate eval reports")
    sp.add_argument("reports", type=Path, nargs="+")
    sp.add_argument("--out", type=Path)
    return p


def _read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise CorpusError(f"--config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config: {path} must hold a JSON object")
    return data


def _load_one_corpus(paths: Sequence[Path]):
    if len(paths) != 1:
        raise UsageError("--corpus: exactly one corpus expected for this command")
    return load_corpus(paths[0], zscore=True)


def _train_config(args, cfg: dict, stage: str) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    t.setdefault("stage", stage)
    flags = {
        "stage": args.stage, "learning_rate": args.lr, "batch_size": args.batch, "n_epochs": args.epochs,
        "seed": args.seed, "precision": args.precision, "threads": args.threads,
        "mask_strategy": getattr(args, "mask_strategy", None), "mask_ratio": getattr(args, "mask_ratio", None),
        "view_strategy": getattr(args, "view_strategy", None),
    }
    t.update({k: v for k, v in flags.items() if v is not None})
    t["corpora"] = [str(c) for c in args.corpus]
    return TrainConfig(**t)


def _model_overrides(args, cfg: dict) -> dict:
    m = dict(cfg.get("model", {}))
    if args.input_mode is not None:
        m["input_mode"] = args.input_mode
    if isinstance(m.get("partition"), str):
        m["partition"] = load_partition(m["partition"]).to_json()
    return m


def cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    corpus = synth_corpus(SynthConfig.from_dict(cfg))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} pairs to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _read_config(args.config)
    corpora = [load_corpus(p, zscore=True) for p in args.corpus]
    tcfg = _train_config(args, cfg, "pretrain")
    mcfg = pretrain_config_for(corpora, **_model_overrides(args, cfg))
    ckpt = pretrain(corpora, mcfg, tcfg)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"out": str(args.out), "loss_history": ckpt.loss_history, "threads": tcfg.threads}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    corpus = _load_one_corpus(args.corpus)
    m = _model_overrides(args, cfg)
    multiview = (args.partition is not None or args.view_strategy is not None or args.stage == "multiview"
                 or m.get("partition") is not None)
    if args.partition is not None or (multiview and m.get("partition") is None):
        m["partition"] = load_partition(args.partition or "default").to_json()
    stage = "multiview" if multiview else "single"
    tcfg = _train_config(args, cfg, stage)
    mcfg = ModelConfig.from_dict({"vocab_size": len(corpus.vocabulary),
                                  "channel_labels": list(corpus.channel_labels), **m})
    init = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    resume = load_checkpoint(args.ckpt) if args.ckpt else None
    ckpt = finetune(corpus, mcfg, tcfg, init=init, resume=resume)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"out": str(args.out), "loss_history": ckpt.loss_history, "threads": tcfg.threads}))
    return EXIT_OK


def _model_and_corpus(args):
    ckpt = load_checkpoint(args.ckpt)
    corpus = _load_one_corpus(args.corpus)
    return ckpt, model_from_checkpoint(ckpt), corpus


def cmd_eval(args) -> int:
    torch.set_num_threads(args.threads)
    ckpt, model, corpus = _model_and_corpus(args)
    report = evaluate(model, corpus, args.mode, args.beam_width, vocab=ckpt.vocab)
    meta = {"threads": args.threads, "beam_width": args.beam_width if args.mode == "beam" else None}
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.to_json(**meta) + "\n")
    sys.stdout.write(format_table({args.mode: report}))
    return EXIT_OK


def cmd_decode(args) -> int:
    torch.set_num_threads(args.threads)
    ckpt, model, corpus = _model_and_corpus(args)
    try:
        indices = list(range(len(corpus))) if args.indices is None else [int(i) for i in args.indices.split(",")]
    except ValueError as exc:
        raise UsageError(f"--indices: {exc}") from exc
    try:
        text = case_report(model, corpus, indices, args.mode, args.beam_width, vocab=ckpt.vocab)
    except IndexError as exc:
        raise UsageError(f"--indices: {exc}") from exc
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _inspect_checkpoint(path: Path) -> tuple[dict, list[str]]:
    ckpt = load_checkpoint(path)
    problems = []
    for name, arr in ckpt.params.items():
        if not np.all(np.isfinite(arr)):
            problems.append(f"parameter {name} has non-finite values")
    mcfg = ModelConfig.from_dict(ckpt.model_config)
    if ckpt.kind == "eeg2text":
        try:
            load_state(EEG2Text(mcfg), ckpt.params, strict=True)
        except TrainingError as exc:
            problems.append(f"parameters do not fit the model config: {exc}")
        if ckpt.vocab is None or tuple(ckpt.vocab[:4]) != SPECIAL_TOKENS or len(ckpt.vocab) != mcfg.vocab_size:
            problems.append("vocabulary missing, without reserved tokens, or sized unlike vocab_size")
    elif ckpt.kind != "pretrain":
        problems.append(f"unknown checkpoint kind {ckpt.kind!r}")
    if mcfg.partition is not None:
        problems += validate_partition(mcfg.partition, canonical=None)
    if len(ckpt.loss_history) > ckpt.epoch:
        problems.append("loss history longer than the recorded epoch count")
    info = {"type": "checkpoint", "kind": ckpt.kind, "epoch": ckpt.epoch, "adam_step": ckpt.adam_step,
            "n_params": int(sum(a.size for a in ckpt.params.values())), "format_version": ckpt.format_version}
    return info, problems


def cmd_inspect(args) -> int:
    target = args.path
    path = Path(target)
    if target == "default" and not path.exists():
        part = default_partition()
        info, problems = {"type": "partition", "regions": dict(zip(part.region_names, part.sizes))}, \
            validate_partition(part)
    elif path.is_dir():
        corpus = load_corpus(path)
        info = {"type": "corpus", "name": corpus.name, "n_pairs": len(corpus), "n_channels": len(corpus.channel_labels),
                "sample_rate": corpus.sample_rate, "vocab_size": len(corpus.vocabulary)}
        problems = [f"sentence {i} has tokens outside the vocabulary" for i, s in enumerate(corpus.sentences)
                    if any(t not in corpus.vocabulary for t in s.tokens)]
    elif path.is_file() and path.read_bytes()[:len(MAGIC)] == MAGIC:
        info, problems = _inspect_checkpoint(path)
    elif path.is_file():
        part = load_partition(path)
        info = {"type": "partition", "regions": dict(zip(part.region_names, part.sizes))}
        problems = validate_partition(part)
    else:
        raise CorpusError(f"inspect: no such file or directory: {target}")
    info["valid"] = not problems
    info["problems"] = problems
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK if not problems else EXIT_DATA


def cmd_report(args) -> int:
    rows = {}
    for path in args.reports:
        try:
            rows[path.stem] = MetricsReport.from_dict(json.loads(path.read_text()))
        except OSError as exc:
            raise CorpusError(f"report: cannot read {path}: {exc}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise CorpusError(f"report: {path} is not an eval report: {exc}") from exc
    table = format_table(rows)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "decode": cmd_decode, "inspect": cmd_inspect, "report": cmd_report}


def _setup_logging() -> None:
    level = os.environ.get("EEG2TEXT_LOG", "error").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.verb](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ad.NonFiniteError, ArithmeticError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (CorpusError, CheckpointError, VocabMismatchError, KeyError, OSError, ad.ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
