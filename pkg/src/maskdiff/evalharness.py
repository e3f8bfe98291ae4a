"""Scorers, timing metrics and the (L, B, Z) sweep runner."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import (
    ConfigError, SamplerConfig, TokenSequence, display_text, sampler_config_violations, truncate_at_eot,
)
from .sampler import generate
from .toydata import CLOSED_ANSWERS


def repetition_rate(seq) -> float:
    """Fraction of adjacent pairs (i-1, i) holding the same token."""
    ids = np.asarray(getattr(seq, "ids", seq))
    if ids.size == 0:
        raise ValueError("repetition_rate of an empty sequence")
    if ids.size == 1:
        return 0.0
    return float(np.mean(ids[1:] == ids[:-1]))


def token_recall(truth, generated) -> float:
    """Share of distinct ground-truth tokens that appear anywhere in ``generated``.

    Accepts TokenSequences or any iterables of hashable tokens (e.g. words).
    """
    t, g = _token_set(truth), _token_set(generated)
    if not t:
        raise ValueError("token_recall needs a non-empty truth")
    return len(t & g) / len(t)


def _token_set(x) -> set:
    if isinstance(x, (TokenSequence, np.ndarray)):
        return set(np.asarray(getattr(x, "ids", x)).tolist())
    return set(x)


def normalize_answer(text: str) -> str:
    return text.strip().lower().rstrip(".!?,;: ").strip()


def closed_accuracy(truth: str, generated) -> int:
    return int(normalize_answer(display_text(generated)) == normalize_answer(truth))


def words(text: str) -> list[str]:
    return normalize_answer(text).split()


def emitted_tokens(seq) -> int:
    """Tokens before the first end-of-text marker (all of them if absent)."""
    return len(truncate_at_eot(seq))


def timing_stats(traces):
    """(T/Q, W/Q, T/W): seconds per query, tokens per query, seconds per token."""
    if not traces:
        raise ValueError("timing_stats needs at least one trace")
    tq = float(np.mean([tr.elapsed for tr in traces]))
    wq = float(np.mean([emitted_tokens(tr.output) for tr in traces]))
    return tq, wq, (tq / wq if wq else float("inf"))


@dataclass
class MetricsRecord:
    gen_length: int
    block_length: int
    steps: int
    remask_mode: str
    temperature: str
    seed: int
    n_queries: int
    calls_per_query: float
    closed_accuracy: float
    open_recall: float
    score: float
    repetition_rate: float
    t_per_q: float
    w_per_q: float
    t_per_w: float


CSV_COLUMNS = [f.name for f in fields(MetricsRecord)]
TIMING_COLUMNS = ("t_per_q", "t_per_w")


def query_of(instance):
    """(prompt, truth text) of the instance's last turn."""
    prompt, response = instance.turns[-1]
    return prompt, display_text(response)


def score_outputs(truths, outputs) -> dict:
    """Task scores from stored outputs; a pure function of its inputs."""
    closed, open_, per_query, reps = [], [], [], []
    for truth, out in zip(truths, outputs):
        if normalize_answer(truth) in CLOSED_ANSWERS:
            s = closed_accuracy(truth, out)
            closed.append(s)
        else:
            s = token_recall(words(truth), words(display_text(out)))
            open_.append(s)
        per_query.append(s)
        emitted = truncate_at_eot(out)
        reps.append(repetition_rate(emitted) if len(emitted) else 0.0)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return dict(closed_accuracy=mean(closed), open_recall=mean(open_), score=mean(per_query),
                repetition_rate=mean(reps))


def run_config(corpus, model, cfg: SamplerConfig):
    """Generate for every query; returns (outputs, traces)."""
    outputs, traces = [], []
    for i, inst in enumerate(corpus):
        prompt, _ = query_of(inst)
        rng = np.random.default_rng([cfg.seed & 0xFFFF_FFFF_FFFF_FFFF, i])
        out, trace = generate(inst.visual_features, prompt, model, cfg, rng=rng)
        outputs.append(out)
        traces.append(trace)
    return outputs, traces


def evaluate_config(corpus, model, cfg: SamplerConfig) -> MetricsRecord:
    outputs, traces = run_config(corpus, model, cfg)
    scores = score_outputs([query_of(inst)[1] for inst in corpus], outputs)
    tq, wq, tw = timing_stats(traces)
    return MetricsRecord(
        gen_length=cfg.gen_length, block_length=cfg.block_length, steps=cfg.steps,
        remask_mode=cfg.remask_mode, temperature="greedy" if cfg.temperature is None else repr(cfg.temperature),
        seed=cfg.seed, n_queries=len(corpus),
        calls_per_query=float(np.mean([tr.predictor_calls for tr in traces])),
        t_per_q=tq, w_per_q=wq, t_per_w=tw, **scores,
    )


def run_sweep(corpus, model, configs, threads: int | None = None) -> list[MetricsRecord]:
    """Evaluate every config over the corpus; records come back in grid order.

    The whole grid is validated before anything runs.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("sweep corpus is empty")
    configs = list(configs)
    bad = [f"{c.gen_length}/{c.block_length}/{c.steps}: {v}" for c in configs for v in sampler_config_violations(c)]
    if bad:
        raise ConfigError(bad)
    threads = threads or int(os.environ.get("MDLM_THREADS", "1"))
    if threads <= 1 or len(configs) == 1:
        return [evaluate_config(corpus, model, c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: evaluate_config(corpus, model, c), configs))


def write_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: format_cell(v) for k, v in asdict(rec).items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_cell(v):
    return repr(v) if isinstance(v, float) else v
