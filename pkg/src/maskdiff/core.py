"""Domain types, the byte-level toy tokenizer and config validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Reserved ids that follow the 256 byte values.
EOT_ID = 256  # end of text; pads generated/training responses
PAD_ID = 257  # batch padding, never attended to and never scored
USER_ID = 258  # marks the start of a human turn
ASSISTANT_ID = 259  # marks the start of an assistant turn
N_RESERVED = 4
BYTE_VOCAB = 256 + N_RESERVED


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


class MaskedSequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token vocabulary. ``mask_id`` is always ``size``, one past the last real token."""

    size: int = BYTE_VOCAB

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


def _as_ids(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Clean token ids; never contains the mask id."""

    ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", _as_ids(self.ids))

    @classmethod
    def checked(cls, ids, vocab: Vocab) -> "TokenSequence":
        seq = cls(ids)
        if seq.ids.size and (seq.ids.min() < 0 or seq.ids.max() >= vocab.size):
            raise ValueError("clean sequence has ids outside [0, V)")
        return seq

    def __len__(self):
        return int(self.ids.size)

    def __eq__(self, other):
        return isinstance(other, TokenSequence) and np.array_equal(self.ids, other.ids)

    def __hash__(self):
        return hash(self.ids.tobytes())

    def tolist(self) -> list[int]:
        return self.ids.tolist()


@dataclass(frozen=True, eq=False)
class MaskedSequence:
    """Token ids that may contain the mask id, together with the noise level ``t``."""

    ids: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "ids", _as_ids(self.ids))
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"noise level must lie in [0, 1], got {self.t}")

    def __len__(self):
        return int(self.ids.size)

    def __eq__(self, other):
        return (
            isinstance(other, MaskedSequence)
            and self.t == other.t
            and np.array_equal(self.ids, other.ids)
        )

    def __hash__(self):
        return hash((self.ids.tobytes(), self.t))

    def mask(self, vocab: Vocab) -> np.ndarray:
        return self.ids == vocab.mask_id


@dataclass(frozen=True)
class DialogueInstance:
    """An image (as a feature vector) plus one or more (prompt, response) turns."""

    turns: tuple
    visual_features: Optional[np.ndarray] = None
    image_id: str = ""

    def __post_init__(self):
        turns = tuple((TokenSequence(p.ids), TokenSequence(r.ids)) for p, r in self.turns)
        if not turns:
            raise ValueError("a dialogue needs at least one turn")
        if any(len(r) == 0 for _, r in turns):
            raise ValueError("every response must be non-empty")
        object.__setattr__(self, "turns", turns)
        if self.visual_features is not None:
            feats = np.asarray(self.visual_features, dtype=np.float64).reshape(-1).copy()
            feats.setflags(write=False)
            object.__setattr__(self, "visual_features", feats)

    @property
    def prompt(self) -> TokenSequence:
        return self.turns[0][0]

    @property
    def response(self) -> TokenSequence:
        return self.turns[-1][1]

    def __eq__(self, other):
        if not isinstance(other, DialogueInstance):
            return NotImplemented
        if self.image_id != other.image_id or self.turns != other.turns:
            return False
        a, b = self.visual_features, other.visual_features
        if a is None or b is None:
            return a is b
        return np.array_equal(a, b)

    __hash__ = None


REMASK_MODES = ("low_confidence", "random")


@dataclass(frozen=True)
class SamplerConfig:
    gen_length: int = 64
    block_length: int = 64
    steps: int = 64
    remask_mode: str = "low_confidence"
    temperature: Optional[float] = None  # None means greedy argmax
    seed: int = 0

    @property
    def greedy(self) -> bool:
        return self.temperature is None

    @property
    def num_blocks(self) -> int:
        return self.gen_length // self.block_length

    @property
    def steps_per_block(self) -> int:
        return self.steps * self.block_length // self.gen_length


def sampler_config_violations(cfg: SamplerConfig) -> list[str]:
    L, B, Z = cfg.gen_length, cfg.block_length, cfg.steps
    bad = []
    for name, v in (("gen_length", L), ("block_length", B), ("steps", Z)):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            bad.append(f"{name} must be a positive integer (got {v!r})")
    if bad:
        return bad
    if B > L:
        bad.append(f"block_length <= gen_length (B={B}, L={L})")
    if L % B:
        bad.append(f"gen_length mod block_length == 0 (L={L}, B={B})")
    if (Z * B) % L:
        bad.append(f"steps*block_length mod gen_length == 0 (Z={Z}, B={B}, L={L})")
    if Z > L:
        bad.append(f"steps <= gen_length (Z={Z}, L={L})")
    if cfg.remask_mode not in REMASK_MODES:
        bad.append(f"remask_mode in {REMASK_MODES} (got {cfg.remask_mode!r})")
    if cfg.temperature is not None and not cfg.temperature > 0:
        bad.append(f"temperature must be positive (got {cfg.temperature!r})")
    if not -(2**63) <= int(cfg.seed) < 2**64:
        bad.append("seed must fit in 64 bits")
    return bad


def validate_sampler_config(cfg: SamplerConfig) -> SamplerConfig:
    bad = sampler_config_violations(cfg)
    if bad:
        raise ConfigError(bad)
    return cfg


STAGES = ("alignment", "md_sft", "sd_sft")
GROUPS = ("projector", "backbone")


@dataclass(frozen=True)
class StageConfig:
    """Per-stage training settings.

    The defaults for the learning rates and epochs are large-backbone values;
    use :func:`desk_preset` for values that actually train a small model.
    Responses are padded with EOT to ``response_length``; a non-empty
    ``pad_lengths`` instead pads each batch to a length drawn from it.
    """

    stage: str
    lr_projector: float = 1e-3
    lr_backbone: float = 1e-5
    epochs: int = 2
    batch_size: int = 32
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    response_length: int = 64
    pad_lengths: tuple = ()
    trainable_groups: frozenset = field(default=None)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError([f"stage in {STAGES} (got {self.stage!r})"])
        object.__setattr__(self, "pad_lengths", tuple(int(n) for n in self.pad_lengths))
        expected = frozenset({"projector"}) if self.stage == "alignment" else frozenset(GROUPS)
        if self.trainable_groups is None:
            object.__setattr__(self, "trainable_groups", expected)
        bad = []
        if frozenset(self.trainable_groups) != expected:
            bad.append(f"{self.stage} trains exactly {sorted(expected)}")
        if not (self.lr_projector > 0 and self.lr_backbone > 0):
            bad.append("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            bad.append("epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            bad.append("warmup_fraction in [0, 1)")
        if self.response_length < 1 or any(n < 1 for n in self.pad_lengths):
            bad.append("response_length and pad_lengths must be positive")
        if bad:
            raise ConfigError(bad)


# Stage defaults for a large (billions of parameters) backbone.
LARGE_STAGE_DEFAULTS = {
    "alignment": dict(lr_projector=1e-3, lr_backbone=1e-5, epochs=2, batch_size=32),
    "md_sft": dict(lr_projector=1e-5, lr_backbone=1e-5, epochs=4, batch_size=8),
    "sd_sft": dict(lr_projector=2e-6, lr_backbone=2e-6, epochs=2, batch_size=8),
}

DESK_STAGE_PRESETS = {
    "alignment": dict(lr_projector=1e-3, lr_backbone=1e-3, epochs=3, batch_size=32),
    "md_sft": dict(lr_projector=1e-3, lr_backbone=1e-3, epochs=6, batch_size=16),
    # most batches pad to 16 (cheap, strong answer signal); one in four pads to 64
    "sd_sft": dict(lr_projector=3e-3, lr_backbone=3e-3, epochs=200, batch_size=32, pad_lengths=(16, 16, 16, 64)),
}


def large_stage(stage: str, **overrides) -> StageConfig:
    return StageConfig(stage=stage, **{**LARGE_STAGE_DEFAULTS[stage], **overrides})


def desk_preset(stage: str, **overrides) -> StageConfig:
    return StageConfig(stage=stage, **{**DESK_STAGE_PRESETS[stage], **overrides})


def tokenize(text: str, vocab: Vocab = Vocab()) -> TokenSequence:
    if vocab.size < 257:
        raise ValueError("byte-level tokenization needs vocab size >= 257")
    return TokenSequence(np.frombuffer(text.encode("utf-8"), dtype=np.uint8))


def detokenize(seq, vocab: Vocab = Vocab()) -> str:
    ids = np.asarray(getattr(seq, "ids", seq), dtype=np.int64)
    if np.any(ids == vocab.mask_id):
        raise MaskedSequenceError("masked sequence not detokenizable")
    if np.any((ids < 0) | (ids > 255)):
        raise ValueError("only byte ids (0..255) are detokenizable; truncate at EOT first")
    return ids.astype(np.uint8).tobytes().decode("utf-8")


def truncate_at_eot(seq) -> TokenSequence:
    """Cut a generated sequence at the first end-of-text id."""
    ids = np.asarray(getattr(seq, "ids", seq), dtype=np.int64)
    hits = np.flatnonzero(ids == EOT_ID)
    return TokenSequence(ids[: hits[0]] if hits.size else ids)


def display_text(seq, vocab: Vocab = Vocab()) -> str:
    ids = truncate_at_eot(seq).ids
    ids = ids[(ids >= 0) & (ids <= 255)]
    return ids.astype(np.uint8).tobytes().decode("utf-8", errors="replace")
