"""Command line: train, generate, sweep, eval, inspect-trace (and toy-corpus)."""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys

import numpy as np
import torch

from .core import (
    STAGES, ConfigError, SamplerConfig, desk_preset, display_text, large_stage, tokenize, validate_sampler_config,
)
from .data import CorpusFormatError, load_corpus, load_features, resolve_features
from .evalharness import CSV_COLUMNS, format_cell, run_sweep, write_csv
from .predictor import ModelDims, init_params
from .sampler import GenerationTrace, generate, render_trace
from .trainer import CheckpointError, Trainer, load_checkpoint, resume_trainer, save_checkpoint

log = logging.getLogger("maskdiff")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _triple(text):
    try:
        L, B, Z = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected L:B:Z, got {text!r}") from None
    return L, B, Z


def _add_sampler_flags(p, lists=False):
    kind = _int_list if lists else int
    default = [64] if lists else 64
    p.add_argument("--gen-length", type=kind, default=default, help="response length L")
    p.add_argument("--block-length", type=kind, default=default, help="block length B")
    p.add_argument("--steps", type=kind, default=default, help="sampling steps Z")
    p.add_argument("--remasking", choices=["low-confidence", "random"], default="low-confidence")
    p.add_argument("--temperature", type=float, default=None, help="omit (or 0) for greedy decoding")


def _add_model_flags(p, corpus_required=False):
    p.add_argument("--checkpoint", help="model checkpoint; a fresh seeded model if omitted")
    p.add_argument("--corpus", required=corpus_required, help="dialogue corpus (tab-separated)")
    p.add_argument("--features", help="feature table; missing ids use the synthetic provider")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdiff", description="Masked diffusion VQA toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="run one training stage")
    _add_model_flags(p, corpus_required=True)
    p.add_argument("--stage", required=True, choices=[s.replace("_", "-") for s in STAGES])
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--preset", choices=["desk", "large"], default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="learning rate for both groups")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--resume", action="store_true", help="continue the trainer state stored in --checkpoint")

    p = sub.add_parser("generate", help="answer one prompt")
    _add_model_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--prompt", default="")
    p.add_argument("--image", help="image id whose features condition the answer")
    p.add_argument("--out", help="write the generation trace here")

    p = sub.add_parser("sweep", help="evaluate a grid of (L, B, Z) configs")
    _add_model_flags(p, corpus_required=True)
    _add_sampler_flags(p, lists=True)
    p.add_argument("--config", type=_triple, action="append", help="explicit L:B:Z (repeatable)")
    p.add_argument("--limit", type=int, help="use only the first N queries")
    p.add_argument("--out", help="CSV report path")

    p = sub.add_parser("eval", help="evaluate one config")
    _add_model_flags(p, corpus_required=True)
    _add_sampler_flags(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="CSV report path")

    p = sub.add_parser("inspect-trace", help="render a saved generation trace")
    p.add_argument("trace")
    p.add_argument("--out")

    p = sub.add_parser("toy-corpus", help="write the synthetic toy VQA corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features-dim", type=int, default=16)
    return parser


def _threads() -> int:
    raw = os.environ.get("MDLM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MDLM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MDLM_THREADS must be a positive integer, got {raw!r}")
    return n


def _sampler_config(args, L, B, Z) -> SamplerConfig:
    temp = args.temperature if args.temperature else None
    return SamplerConfig(L, B, Z, remask_mode=args.remasking.replace("-", "_"), temperature=temp, seed=args.seed)


def _load_model(args):
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        return model
    return init_params(args.seed, ModelDims())


def _header(command: str, **fields) -> str:
    return "# " + command + " " + " ".join(f"{k}={v}" for k, v in fields.items())


def _emit(text: str, out=None):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_train(args):
    stage = args.stage.replace("-", "_")
    mode = "alignment" if stage == "alignment" else "dialogue"
    if args.resume:
        if not args.checkpoint:
            raise UsageError("--resume needs --checkpoint")
        model, meta, _ = load_checkpoint(args.checkpoint)
        corpus = load_corpus(args.corpus, mode, features=args.features, D=model.dims.D)
        trainer = resume_trainer(args.checkpoint, corpus)
        if trainer.stage.stage != stage:
            raise UsageError(f"checkpoint holds {trainer.stage.stage} state, not {stage}")
    else:
        model = _load_model(args)
        corpus = load_corpus(args.corpus, mode, features=args.features, D=model.dims.D)
        overrides = {k: v for k, v in dict(epochs=args.epochs, batch_size=args.batch_size).items() if v is not None}
        if args.lr is not None:
            overrides.update(lr_projector=args.lr, lr_backbone=args.lr)
        make = desk_preset if args.preset == "desk" else large_stage
        trainer = Trainer(model, make(stage, **overrides), corpus, args.seed)
    st = trainer.stage
    lines = [_header("train", stage=st.stage, corpus=args.corpus, checkpoint=args.checkpoint, seed=trainer.seed,
                     epochs=st.epochs, batch_size=st.batch_size, lr_projector=st.lr_projector,
                     lr_backbone=st.lr_backbone, trainable=",".join(sorted(st.trainable_groups)),
                     instances=len(corpus), total_steps=trainer.total_steps)]
    trainer.run(args.max_steps)
    save_checkpoint(args.out, trainer.model, trainer)
    for i, loss in enumerate(trainer.epoch_losses, 1):
        lines.append(f"epoch={i} loss={loss!r}")
    lines.append(f"step={trainer.step} checkpoint={args.out}")
    sys.stdout.write("\n".join(lines) + "\n")


def cmd_generate(args):
    model = _load_model(args)
    cfg = validate_sampler_config(_sampler_config(args, args.gen_length, args.block_length, args.steps))
    table = load_features(args.features) if args.features else None
    visual = resolve_features(args.image, model.dims.D, table) if args.image else None
    out, trace = generate(visual, tokenize(args.prompt), model, cfg, rng=np.random.default_rng(cfg.seed))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(trace.to_text())
    sys.stdout.write("\n".join([
        _header("generate", L=cfg.gen_length, B=cfg.block_length, Z=cfg.steps, remask=cfg.remask_mode,
                temperature="greedy" if cfg.greedy else repr(cfg.temperature), seed=cfg.seed,
                checkpoint=args.checkpoint, image=args.image, prompt=repr(args.prompt)),
        f"calls={trace.predictor_calls}",
        f"answer={display_text(out)!r}",
    ]) + "\n")


def _grid(args):
    configs = [_sampler_config(args, *t) for t in args.config or []]
    if not args.config:
        configs = [_sampler_config(args, L, B, Z)
                   for L, B, Z in itertools.product(args.gen_length, args.block_length, args.steps)]
    return configs


def _eval_corpus(args, model):
    corpus = load_corpus(args.corpus, "dialogue", features=args.features, D=model.dims.D)
    if args.limit is not None:
        corpus = corpus[: args.limit]
    return corpus


def _report(command, args, configs, records):
    head = _header(command, corpus=args.corpus, checkpoint=args.checkpoint, seed=args.seed,
                   remask=configs[0].remask_mode, limit=args.limit,
                   configs=";".join(f"{c.gen_length}:{c.block_length}:{c.steps}" for c in configs))
    if args.out:
        write_csv(records, args.out)
    rows = [",".join(CSV_COLUMNS)] + [",".join(str(format_cell(getattr(r, c))) for c in CSV_COLUMNS) for r in records]
    sys.stdout.write("\n".join([head] + rows) + "\n")


def cmd_sweep(args):
    model = _load_model(args)
    configs = _grid(args)
    for c in configs:
        validate_sampler_config(c)
    corpus = _eval_corpus(args, model)
    _report("sweep", args, configs, run_sweep(corpus, model, configs, threads=_threads()))


def cmd_eval(args):
    model = _load_model(args)
    cfg = validate_sampler_config(_sampler_config(args, args.gen_length, args.block_length, args.steps))
    corpus = _eval_corpus(args, model)
    _report("eval", args, [cfg], run_sweep(corpus, model, [cfg], threads=1))


def cmd_inspect_trace(args):
    with open(args.trace, encoding="utf-8") as fh:
        trace = GenerationTrace.from_text(fh.read())
    _emit(render_trace(trace), args.out)


def cmd_toy_corpus(args):
    from .toydata import build_toy_corpus, write_toy_corpus

    paths = write_toy_corpus(args.out, build_toy_corpus(seed=args.seed, D=args.features_dim))
    sys.stdout.write(_header("toy-corpus", seed=args.seed, D=args.features_dim) + "\n")
    for name, path in paths.items():
        sys.stdout.write(f"{name}={path}\n")


COMMANDS = {
    "train": cmd_train, "generate": cmd_generate, "sweep": cmd_sweep, "eval": cmd_eval,
    "inspect-trace": cmd_inspect_trace, "toy-corpus": cmd_toy_corpus,
}


def dispatch(argv=None) -> int:
    """Run one command; returns the process exit code (0 ok, 1 runtime error, 2 usage error)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(_threads())
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"maskdiff {args.command}: error: {exc}\n")
        return 2
    except (CheckpointError, CorpusFormatError, OSError, ValueError, FloatingPointError) as exc:
        sys.stderr.write(f"maskdiff {args.command}: {type(exc).__name__}: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
