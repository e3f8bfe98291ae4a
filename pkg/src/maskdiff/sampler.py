"""Semi-autoregressive masked-diffusion decoding with remasking."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import EOT_ID, SamplerConfig, TokenSequence, validate_sampler_config
from .predictor import MaskPredictor, predict_logits


class NonFiniteLogitsError(FloatingPointError):
    pass


@dataclass(frozen=True)
class UnmaskSchedule:
    counts: tuple  # counts[block][step] = tokens committed at that step

    @property
    def num_blocks(self) -> int:
        return len(self.counts)

    @property
    def steps_per_block(self) -> int:
        return len(self.counts[0]) if self.counts else 0

    @property
    def total_steps(self) -> int:
        return sum(len(c) for c in self.counts)


def plan_schedule(cfg: SamplerConfig) -> UnmaskSchedule:
    """Split each block's B tokens over its Z*B/L steps.

    Every step gets B // n tokens and the first B % n steps one more, so
    after step j of n the block's masked fraction is close to (n - j) / n.
    """
    validate_sampler_config(cfg)
    n = cfg.steps_per_block
    base, rem = divmod(cfg.block_length, n)
    per_block = tuple(base + (1 if j < rem else 0) for j in range(n))
    return UnmaskSchedule(tuple(per_block for _ in range(cfg.num_blocks)))


def _check_keep(n_positions: int, keep_masked: int):
    if keep_masked < 0:
        raise ValueError(f"keep_masked must be non-negative, got {keep_masked}")
    if keep_masked > n_positions:
        raise ValueError(f"keep_masked={keep_masked} exceeds the {n_positions} masked positions")


def remask_low_confidence(positions, confidences, keep_masked: int) -> np.ndarray:
    """The ``keep_masked`` lowest-confidence positions (ties: lower position first), sorted."""
    positions = np.asarray(positions, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    _check_keep(positions.size, keep_masked)
    order = np.lexsort((positions, confidences))
    return np.sort(positions[order[:keep_masked]])


def remask_random(positions, keep_masked: int, rng: np.random.Generator) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    _check_keep(positions.size, keep_masked)
    if keep_masked == 0:
        return positions[:0]
    return np.sort(rng.choice(positions, size=keep_masked, replace=False))


@dataclass(frozen=True)
class TraceStep:
    step: int
    block: int
    t: float
    s: float
    positions: tuple
    tokens: tuple
    confidences: tuple
    latency: float


@dataclass
class GenerationTrace:
    config: SamplerConfig
    steps: list = field(default_factory=list)
    output: Optional[np.ndarray] = None
    elapsed: float = 0.0

    @property
    def predictor_calls(self) -> int:
        return len(self.steps)

    def unmasked_total(self) -> int:
        return sum(len(s.positions) for s in self.steps)

    def to_text(self) -> str:
        c = self.config
        temp = "greedy" if c.temperature is None else repr(c.temperature)
        lines = [
            f"# trace L={c.gen_length} B={c.block_length} Z={c.steps} remask={c.remask_mode} "
            f"temperature={temp} seed={c.seed} elapsed={self.elapsed!r}"
        ]
        for st in self.steps:
            cells = ",".join(f"{p}:{tok}:{conf!r}" for p, tok, conf in zip(st.positions, st.tokens, st.confidences))
            lines.append(
                f"step={st.step} block={st.block} t={st.t!r} s={st.s!r} latency={st.latency!r} unmask={cells}"
            )
        out = "" if self.output is None else ",".join(str(int(v)) for v in self.output)
        lines.append(f"output={out}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GenerationTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# trace "):
            raise ValueError("not a generation trace")
        head = dict(kv.split("=", 1) for kv in lines[0][len("# trace "):].split())
        cfg = SamplerConfig(
            gen_length=int(head["L"]), block_length=int(head["B"]), steps=int(head["Z"]),
            remask_mode=head["remask"],
            temperature=None if head["temperature"] == "greedy" else float(head["temperature"]),
            seed=int(head["seed"]),
        )
        trace = cls(cfg, elapsed=float(head["elapsed"]))
        for ln in lines[1:]:
            if ln.startswith("output="):
                body = ln[len("output="):]
                trace.output = np.array([int(v) for v in body.split(",")] if body else [], dtype=np.int64)
                continue
            f = dict(kv.split("=", 1) for kv in ln.split())
            cells = [c.split(":") for c in f["unmask"].split(",")] if f["unmask"] else []
            trace.steps.append(TraceStep(
                step=int(f["step"]), block=int(f["block"]), t=float(f["t"]), s=float(f["s"]),
                positions=tuple(int(c[0]) for c in cells), tokens=tuple(int(c[1]) for c in cells),
                confidences=tuple(float(c[2]) for c in cells), latency=float(f["latency"]),
            ))
        return trace


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_predict_fn(model, visual_features, prompt) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, MaskPredictor):
        return lambda resp: predict_logits(model, visual_features, prompt, resp)
    if callable(model):
        return lambda resp: np.asarray(model(visual_features, prompt, resp), dtype=np.float64)
    raise TypeError("model must be a MaskPredictor or a callable (visual, prompt, response_ids) -> logits")


def generate(visual_features, prompt: TokenSequence, model, cfg: SamplerConfig,
             rng: Optional[np.random.Generator] = None, mask_id: Optional[int] = None):
    """Decode a length-L response from an all-mask start.

    ``model`` is a :class:`MaskPredictor` or any callable
    ``(visual, prompt, response_ids) -> logits (L, V)``. Blocks are filled
    left to right; each step calls the predictor once, proposes tokens at the
    active block's masked positions and commits all but the ones chosen for
    remasking. Committed tokens never change. Returns (tokens, trace).
    """
    validate_sampler_config(cfg)
    if mask_id is None:
        if not isinstance(model, MaskPredictor):
            raise ValueError("mask_id is required for callable predictors")
        mask_id = model.mask_id
    rng = np.random.default_rng(cfg.seed & 0xFFFF_FFFF_FFFF_FFFF) if rng is None else rng
    fn = _as_predict_fn(model, visual_features, prompt)
    schedule = plan_schedule(cfg)
    L, B = cfg.gen_length, cfg.block_length
    n = schedule.steps_per_block

    x = np.full(L, mask_id, dtype=np.int64)
    trace = GenerationTrace(cfg)
    started = time.perf_counter()
    step = 0
    for b, counts in enumerate(schedule.counts):
        lo = b * B
        for j, count in enumerate(counts):
            tick = time.perf_counter()
            logits = fn(x)
            latency = time.perf_counter() - tick
            if logits.shape[0] != L:
                raise ValueError(f"predictor returned {logits.shape[0]} positions, expected {L}")
            masked = lo + np.flatnonzero(x[lo:lo + B] == mask_id)
            lg = logits[masked]
            if not np.isfinite(lg).all():
                raise NonFiniteLogitsError(f"non-finite logits at step {step}")
            if cfg.temperature is None:
                probs = _softmax(lg)
                cand = probs.argmax(axis=-1)
            else:
                probs = _softmax(lg / cfg.temperature)
                u = rng.random(masked.size)
                cand = np.minimum((probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1), probs.shape[1] - 1)
            conf = probs[np.arange(masked.size), cand]

            keep = masked.size - count
            if cfg.remask_mode == "low_confidence":
                stay = remask_low_confidence(masked, conf, keep)
            else:
                stay = remask_random(masked, keep, rng)
            commit = ~np.isin(masked, stay)
            x[masked[commit]] = cand[commit]

            t = 1.0 - j / n
            trace.steps.append(TraceStep(
                step=step, block=b, t=t, s=t - 1.0 / n,
                positions=tuple(int(p) for p in masked[commit]),
                tokens=tuple(int(v) for v in cand[commit]),
                confidences=tuple(float(c) for c in conf[commit]),
                latency=latency,
            ))
            step += 1
    trace.elapsed = time.perf_counter() - started
    trace.output = x.copy()
    return TokenSequence(x), trace


def render_trace(trace: GenerationTrace, mask_char: str = "_") -> str:
    """Step-by-step view of which positions were filled when."""
    L = trace.config.gen_length
    state = [mask_char] * L
    lines = [f"L={L} B={trace.config.block_length} Z={trace.config.steps} "
             f"remask={trace.config.remask_mode} calls={trace.predictor_calls}"]
    for st in trace.steps:
        for p, tok in zip(st.positions, st.tokens):
            state[p] = _glyph(tok)
        lines.append(f"{st.step:4d} b{st.block} t={st.t:.3f} +{len(st.positions):<3d} |{''.join(state)}|")
    return "\n".join(lines) + "\n"


def _glyph(tok: int) -> str:
    if tok == EOT_ID:
        return "~"
    if 32 <= tok < 127:
        return chr(tok)
    return "?"
