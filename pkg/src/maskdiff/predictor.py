"""Bidirectional mask predictor with a visual-prefix projector."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ASSISTANT_ID, BYTE_VOCAB, EOT_ID, PAD_ID, USER_ID, MaskedSequence, TokenSequence

VISUAL_PREFIX_LEN = 1


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelDims:
    V: int = BYTE_VOCAB
    D: int = 16
    d: int = 64
    d_ff: int = 256
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 512
    d_proj: int = 0  # hidden width of the projector; 0 means d

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "d_proj" and (not isinstance(v, int) or v <= 0):
                raise ValueError(f"{k} must be a positive integer, got {v!r}")
        if self.d_proj < 0:
            raise ValueError("d_proj must be >= 0")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")

    @property
    def proj_hidden(self) -> int:
        return self.d_proj or self.d

    @property
    def anchor(self) -> int:
        """Position index where the final response starts."""
        return self.max_len // 2


class Block(nn.Module):
    def __init__(self, d, n_heads, d_ff):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, d_ff)
        self.ff_out = nn.Linear(d_ff, d)

    def forward(self, x, key_block):
        N, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (z.view(N, n, h, d // h).transpose(1, 2) for z in (q, k, v))
        # no causal mask: every position attends to every unblocked position
        allowed = None if key_block is None else ~key_block[:, None, None, :]
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        x = x + self.out(att.transpose(1, 2).reshape(N, n, d))
        return x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))


class MaskPredictor(nn.Module):
    """Transformer over [visual prefix | text], scoring V real tokens per position.

    The mask token (id V) has an input embedding but no output column.
    Parameters named ``projector.*`` form the projector group; everything
    else is the backbone.
    """

    def __init__(self, dims: ModelDims = ModelDims()):
        super().__init__()
        self.dims = dims
        self.tok_emb = nn.Embedding(dims.V + 1, dims.d)
        self.pos_emb = nn.Parameter(torch.zeros(dims.max_len, dims.d))
        self.layers = nn.ModuleList(Block(dims.d, dims.n_heads, dims.d_ff) for _ in range(dims.n_layers))
        self.ln_f = nn.LayerNorm(dims.d)
        self.head = nn.Linear(dims.d, dims.V)
        self.projector = nn.Sequential(
            nn.Linear(dims.D, dims.proj_hidden), nn.GELU(), nn.Linear(dims.proj_hidden, dims.d)
        )

    @property
    def mask_id(self) -> int:
        return self.dims.V

    @property
    def anchor(self) -> int:
        return self.dims.anchor

    def forward(self, ids, visual=None, has_visual=None, key_pad=None, positions=None):
        """ids (N, n) -> logits (N, n, V) for the text positions.

        ``visual`` is (N, D) or None. ``has_visual`` (N,) bool drops the prefix
        for rows without features; ``key_pad`` (N, n) bool marks padding.
        ``positions`` (N, n) gives each text token's position index (the
        prefix always sits at 0); by default text runs from index 1 upward.
        """
        N, n = ids.shape
        k = VISUAL_PREFIX_LEN
        if positions is None:
            if n + k > self.dims.max_len:
                raise ValueError(f"sequence of {n} tokens exceeds max_len {self.dims.max_len}")
            pos = self.pos_emb[k : k + n]
        else:
            pos = self.pos_emb[positions]
        x = self.tok_emb(ids) + pos
        key_block = key_pad
        if visual is not None:
            prefix = self.projector(visual.to(x.dtype)).unsqueeze(1) + self.pos_emb[:k]
            x = torch.cat([prefix, x], dim=1)
            pre_block = torch.zeros(N, k, dtype=torch.bool) if has_visual is None else ~has_visual[:, None]
            text_block = torch.zeros(N, n, dtype=torch.bool) if key_pad is None else key_pad
            key_block = torch.cat([pre_block, text_block], dim=1)
        for layer in self.layers:
            x = layer(x, key_block)
        if visual is not None:
            x = x[:, k:]
        return self.head(self.ln_f(x))

    def group_of(self, name: str) -> str:
        return "projector" if name.startswith("projector.") else "backbone"


def init_params(seed: int, dims: ModelDims = ModelDims(), dtype=torch.float32) -> MaskPredictor:
    """Build a predictor with deterministic weights.

    Every weight matrix is drawn from U(-a, a) with a = 1/sqrt(fan_in),
    where fan_in is the input width (d for the embedding tables). Biases
    start at zero, layer-norm gains at one.
    """
    model = MaskPredictor(dims).to(dtype)
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("ln") or ".ln" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[-1] if (name == "tok_emb.weight" or name == "pos_emb") else p.shape[1]
                a = 1.0 / math.sqrt(fan_in)
                u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((2.0 * u - 1.0) * a)
    return model


def build_dialogue(turns, vocab_size: int = BYTE_VOCAB):
    """Concatenate (prompt_ids, response_ids) turns; returns (ids, response_mask)."""
    markers = vocab_size >= BYTE_VOCAB
    parts, is_resp = [], []
    for p, r in turns:
        p, r = np.asarray(p, dtype=np.int64), np.asarray(r, dtype=np.int64)
        if markers:
            parts.append([USER_ID])
            is_resp.append([False])
        parts.append(p)
        is_resp.append(np.zeros(p.size, dtype=bool))
        if markers:
            parts.append([ASSISTANT_ID])
            is_resp.append([False])
        parts.append(r)
        is_resp.append(np.ones(r.size, dtype=bool))
    ids = np.concatenate([np.asarray(x, dtype=np.int64) for x in parts])
    return ids, np.concatenate([np.asarray(x, dtype=bool) for x in is_resp])


def anchored_positions(n_tokens: int, last_response_start: int, dims: ModelDims) -> np.ndarray:
    """Position indices that put the final response at ``dims.anchor``.

    Everything before it (prompt, earlier turns) counts backwards from the
    anchor, so the answer always sits at the same offset from the end of the
    question regardless of how long the question is.
    """
    first = dims.anchor - last_response_start
    if first < VISUAL_PREFIX_LEN:
        raise ValueError(f"prompt history of {last_response_start} tokens does not fit before position {dims.anchor}")
    if first + n_tokens > dims.max_len:
        raise ValueError(f"response of {n_tokens - last_response_start} tokens exceeds "
                         f"{dims.max_len - dims.anchor} positions after the anchor")
    return np.arange(first, first + n_tokens, dtype=np.int64)


def last_response_start(is_resp: np.ndarray) -> int:
    starts = np.flatnonzero(is_resp & ~np.concatenate([[False], is_resp[:-1]]))
    return int(starts[-1])


@dataclass(frozen=True)
class LogitsGrid:
    logits: np.ndarray  # (n, V)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def _features_tensor(model, visual_features):
    if visual_features is None:
        return None
    f = np.array(visual_features, dtype=np.float64).reshape(-1)
    if f.size != model.dims.D:
        raise ValueError(f"feature dimension {f.size} != D={model.dims.D}")
    return torch.as_tensor(f, dtype=next(model.parameters()).dtype).unsqueeze(0)


def project_visual(features, model: MaskPredictor) -> np.ndarray:
    """Projected prefix embedding, shape (1, d)."""
    with torch.no_grad():
        out = model.projector(_features_tensor(model, features))
    return out.numpy().astype(np.float64)


def predict_logits(model: MaskPredictor, visual_features, prompt: TokenSequence, response_ids) -> np.ndarray:
    response_ids = np.asarray(response_ids, dtype=np.int64)
    if response_ids.size < 1:
        raise ValueError("response must have at least one position")
    ids, resp = build_dialogue([(prompt.ids, response_ids)], model.dims.V)
    pos = anchored_positions(ids.size, last_response_start(resp), model.dims)
    with torch.no_grad():
        logits = model(torch.as_tensor(ids).unsqueeze(0), _features_tensor(model, visual_features),
                       positions=torch.as_tensor(pos).unsqueeze(0))[0]
    return logits[torch.as_tensor(resp)].double().numpy()


def predict(visual_features: Optional[np.ndarray], prompt: TokenSequence, response: MaskedSequence,
            model: MaskPredictor) -> LogitsGrid:
    """Per-response-position scores over the V real tokens."""
    return LogitsGrid(predict_logits(model, visual_features, prompt, response.ids))


def backward(loss: torch.Tensor, model: MaskPredictor, trainable=None) -> dict:
    """Gradients of ``loss`` for every parameter, keyed by parameter name.

    Parameters that the loss does not touch get an all-zero gradient.
    ``trainable`` optionally restricts which names are differentiated; the
    rest are returned as zeros.
    """
    named = [(n, p) for n, p in model.named_parameters() if trainable is None or n in trainable]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    for (n, p), g in zip(named, grads):
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in {model.group_of(n)} weight {n}")
        out[n] = g
    return out


__all__ = [
    "EOT_ID", "PAD_ID", "ModelDims", "MaskPredictor", "LogitsGrid", "init_params", "project_visual",
    "predict", "predict_logits", "backward", "build_dialogue", "anchored_positions", "NonFiniteGradientError",
]
