"""Forward masking, the exact reverse transition and the masked-prediction losses."""
from __future__ import annotations

import itertools

import numpy as np
import torch

from .core import DialogueInstance, MaskedSequence, TokenSequence, Vocab

NOISE_FLOOR = 1e-3
PROB_FLOOR = 1e-12


class ZeroLikelihoodError(ValueError):
    pass


def sample_training_noise(rng: np.random.Generator, size=None):
    """Draw t uniformly on (NOISE_FLOOR, 1]."""
    u = rng.random(size)  # [0, 1)
    return 1.0 - (1.0 - NOISE_FLOOR) * u


def sample_stratified_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """n noise levels, one per stratum of (NOISE_FLOOR, 1], in random order.

    Each entry is still marginally uniform on (NOISE_FLOOR, 1]; the batch as a
    whole covers the range evenly, which lowers the variance of the 1/t
    weighted loss.
    """
    u = (rng.permutation(n) + rng.random(n)) / n
    return 1.0 - (1.0 - NOISE_FLOOR) * u


def forward_mask(x0: TokenSequence, t: float, rng: np.random.Generator, vocab: Vocab = Vocab()) -> MaskedSequence:
    """Independently replace each token with the mask id with probability t."""
    ids = x0.ids
    if ids.size and ids.max() >= vocab.size:
        raise ValueError("x0 must not contain the mask id")
    masked = rng.random(ids.size) < t
    return MaskedSequence(np.where(masked, vocab.mask_id, ids), float(t))


def reverse_transition_exact(xt: MaskedSequence, t: float, s: float, conditional, vocab: Vocab = Vocab()) -> dict:
    """Exact distribution of x_s given x_t under the product-form reverse step.

    ``conditional`` is an (len(xt), V) array of per-position clean-token
    distributions; only rows at masked positions are read. Returns a dict
    mapping id tuples to probabilities. Enumerates every outcome, so it is
    only usable on tiny state spaces.
    """
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    cond = np.asarray(conditional, dtype=np.float64)
    ids = xt.ids
    masked = np.flatnonzero(ids == vocab.mask_id)
    if masked.size and cond.shape != (ids.size, vocab.size):
        raise ValueError(f"conditional must have shape {(ids.size, vocab.size)}, got {cond.shape}")
    for i in masked:
        if np.any(cond[i] < 0) or abs(cond[i].sum() - 1.0) > 1e-9:
            raise ValueError(f"conditional at position {i} is not normalized")

    keep = s / t
    per_pos = []
    for i in masked:
        opts = [(vocab.mask_id, keep)] if keep > 0 else []
        opts += [(v, (1.0 - keep) * p) for v, p in enumerate(cond[i]) if p > 0]
        per_pos.append(opts)

    out: dict = {}
    for combo in itertools.product(*per_pos):
        x = ids.copy()
        p = 1.0
        for i, (v, pv) in zip(masked, combo):
            x[i] = v
            p *= pv
        key = tuple(int(v) for v in x)
        out[key] = out.get(key, 0.0) + p
    return out


def _masked_nll(targets: np.ndarray, masked: np.ndarray, probs, t: float, vocab: Vocab) -> float:
    if t <= 0:
        raise ValueError("noise level must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (targets.size, vocab.size):
        raise ValueError(f"probs must have shape {(targets.size, vocab.size)}, got {probs.shape}")
    if not masked.any():
        return 0.0
    p = probs[np.flatnonzero(masked), targets[masked]]
    if np.any(p == 0):
        raise ZeroLikelihoodError("zero likelihood")
    return float(-np.log(np.maximum(p, PROB_FLOOR)).sum() / t)


def loss_unconditional(x0: TokenSequence, xt: MaskedSequence, probs, vocab: Vocab = Vocab()) -> float:
    """-(1/t) * sum over masked positions of log p(x0_i | x_t)."""
    if len(x0) != len(xt):
        raise ValueError("x0 and xt lengths differ")
    return _masked_nll(x0.ids, xt.mask(vocab), probs, xt.t, vocab)


def instance_responses(instance: DialogueInstance) -> TokenSequence:
    """All assistant responses of a dialogue, concatenated in turn order."""
    return TokenSequence(np.concatenate([r.ids for _, r in instance.turns]))


def loss_conditional(instance: DialogueInstance, rt: MaskedSequence, probs, vocab: Vocab = Vocab()) -> float:
    """Response-only masked NLL; ``probs`` covers the response positions only.

    For multi-turn instances ``rt`` and ``probs`` span every response,
    concatenated in turn order. Prompt positions are never read.
    """
    r0 = instance_responses(instance)
    if len(r0) != len(rt):
        raise ValueError("rt length does not match the response length")
    return _masked_nll(r0.ids, rt.mask(vocab), probs, rt.t, vocab)


def masked_nll_torch(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Batched training form of the same loss.

    logits (N, n, V), targets (N, n), masked (N, n) bool, t (N,). Returns the
    per-instance loss (N,).
    """
    logp = torch.log_softmax(logits, dim=-1)
    logp = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    nll = -(logp * masked.to(logp.dtype)).sum(dim=-1)
    return nll / t.to(logp.dtype)
