"""Three-stage training: freezing, AdamW with warmup + cosine decay, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import EOT_ID, GROUPS, PAD_ID, StageConfig, TokenSequence, Vocab
from .diffusion import forward_mask, masked_nll_torch, sample_stratified_noise, sample_training_noise
from .predictor import MaskPredictor, ModelDims, anchored_positions, backward, build_dialogue, last_response_start

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FreezeMask:
    trainable: dict

    def allows(self, group: str) -> bool:
        return bool(self.trainable.get(group, False))

    def names(self, model: MaskPredictor) -> list[str]:
        return [n for n, _ in model.named_parameters() if self.allows(model.group_of(n))]


def build_freeze_mask(stage: StageConfig) -> FreezeMask:
    # features come from a fixed provider, so there is no vision group to train
    return FreezeMask({g: g in stage.trainable_groups for g in GROUPS})


def lr_factor(step: int, total_steps: int, warmup_fraction: float = 0.03) -> float:
    """Linear warmup to 1 over the first warmup_fraction of steps, then cosine to 0.

    ``step`` is zero-based; the last warmup step returns exactly 1 and the
    final step (total_steps - 1) returns exactly 0.
    """
    warm = max(1, math.ceil(warmup_fraction * total_steps)) if warmup_fraction > 0 else 0
    if step < warm:
        return (step + 1) / warm
    decay = total_steps - 1 - warm
    if decay <= 0:
        return 1.0 if step < total_steps - 1 else 0.0
    progress = min(1.0, (step - warm) / decay)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(model: MaskPredictor, grads: dict, state: AdamState, lrs: dict, freeze: FreezeMask,
                   weight_decay: float = 0.01, betas=BETAS, eps: float = ADAM_EPS) -> AdamState:
    """One AdamW update in place; frozen groups are not touched at all.

    Decay is decoupled (p -= lr * wd * p) and applies to matrices only.
    ``lrs`` maps group name to the already-scheduled learning rate.
    """
    b1, b2 = betas
    state.step += 1
    k = state.step
    with torch.no_grad():
        for name, p in model.named_parameters():
            group = model.group_of(name)
            if not freeze.allows(group):
                continue
            g = grads[name]
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {group} weight {name}")
            lr = lrs[group]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**k)
            v_hat = v / (1 - b2**k)
            update = lr * m_hat / (v_hat.sqrt() + eps)
            if weight_decay and p.ndim >= 2:
                update = update + lr * weight_decay * p
            if not torch.isfinite(update).all():
                raise TrainingError(f"non-finite update in {group} weight {name}")
            p.sub_(update)
    return state


def padded_responses(instance, response_length: int):
    """Each response followed by EOT up to response_length (at least one EOT)."""
    out = []
    for _, r in instance.turns:
        n_eot = max(1, response_length - len(r))
        out.append(np.concatenate([r.ids, np.full(n_eot, EOT_ID, dtype=np.int64)]))
    return out


def make_batch(instances, responses, masked_responses, t, dims: ModelDims):
    """Collate into padded tensors; PAD positions are neither attended nor scored."""
    rows, targets, positions = [], [], []
    for inst, clean, noisy in zip(instances, responses, masked_responses):
        ids, is_resp = build_dialogue([(p.ids, r) for (p, _), r in zip(inst.turns, noisy)], dims.V)
        tgt = np.full(ids.size, -1, dtype=np.int64)
        tgt[is_resp] = np.concatenate(clean)
        rows.append(ids)
        targets.append(tgt)
        positions.append(anchored_positions(ids.size, last_response_start(is_resp), dims))
    n = max(r.size for r in rows)
    N = len(rows)
    ids = np.full((N, n), PAD_ID, dtype=np.int64)
    tgt = np.full((N, n), -1, dtype=np.int64)
    pos = np.full((N, n), dims.max_len - 1, dtype=np.int64)
    key_pad = np.ones((N, n), dtype=bool)
    for i, (r, tg, ps) in enumerate(zip(rows, targets, positions)):
        ids[i, : r.size] = r
        tgt[i, : r.size] = tg
        pos[i, : r.size] = ps
        key_pad[i, : r.size] = False
    has_visual = np.array([inst.visual_features is not None for inst in instances])
    D = next((inst.visual_features.size for inst in instances if inst.visual_features is not None), None)
    visual = None
    if D is not None:
        visual = np.zeros((N, D))
        for i, inst in enumerate(instances):
            if inst.visual_features is not None:
                visual[i] = inst.visual_features
    resp_len = np.array([sum(c.size for c in clean) for clean in responses], dtype=np.float64)
    return dict(
        ids=torch.as_tensor(ids), targets=torch.as_tensor(tgt), key_pad=torch.as_tensor(key_pad),
        positions=torch.as_tensor(pos),
        visual=None if visual is None else torch.as_tensor(visual),
        has_visual=torch.as_tensor(has_visual), t=torch.as_tensor(np.asarray(t, dtype=np.float64)),
        resp_len=torch.as_tensor(resp_len),
    )


def batch_loss(model: MaskPredictor, batch) -> torch.Tensor:
    """Mean over the batch of the response-only masked NLL, per response token."""
    logits = model(batch["ids"], batch["visual"], batch["has_visual"], batch["key_pad"], batch["positions"])
    masked = batch["ids"] == model.mask_id
    per_inst = masked_nll_torch(logits, batch["targets"], masked, batch["t"].to(logits.dtype))
    return (per_inst / batch["resp_len"].to(logits.dtype)).mean()


class Trainer:
    """Owns one stage of training over a corpus.

    The epoch order comes from (seed, epoch) and the noise levels and masks
    from a single generator stream, so a run restored from a checkpoint
    continues exactly where it stopped.
    """

    def __init__(self, model: MaskPredictor, stage: StageConfig, corpus, seed: int = 0, stratified: bool = True):
        if not corpus:
            raise ValueError("corpus is empty")
        self.model = model
        self.stage = stage
        self.corpus = list(corpus)
        self.seed = int(seed)
        self.stratified = stratified
        self.freeze = build_freeze_mask(stage)
        self.vocab = Vocab(model.dims.V)
        self.rng = np.random.default_rng([self.seed, 0x5EED])
        self.opt = AdamState()
        self.step = 0
        self.epoch_losses: list[float] = []
        self._running: list[float] = []
        self.steps_per_epoch = math.ceil(len(self.corpus) / stage.batch_size)
        self.total_steps = self.steps_per_epoch * stage.epochs
        self._plan = None
        self._responses = [padded_responses(inst, stage.response_length) for inst in self.corpus]

    def epoch_batches(self, epoch: int) -> list:
        """Index batches for one epoch, bucketed by sequence length."""
        if self._plan is not None and self._plan[0] == epoch:
            return self._plan[1]
        rng = np.random.default_rng([self.seed, epoch, 0xB47C])
        perm = rng.permutation(len(self.corpus))
        bs = self.stage.batch_size
        lengths = np.array([sum(len(p) + r.size for (p, _), r in zip(inst.turns, rs))
                            for inst, rs in zip(self.corpus, self._responses)])
        batches = []
        chunk = 8 * bs
        for lo in range(0, perm.size, chunk):
            part = perm[lo: lo + chunk]
            part = part[np.argsort(lengths[part], kind="stable")]
            batches += [part[i: i + bs] for i in range(0, part.size, bs)]
        order = rng.permutation(len(batches))
        self._plan = (epoch, [batches[i] for i in order])
        return self._plan[1]

    def train_step(self) -> float:
        epoch, within = divmod(self.step, self.steps_per_epoch)
        idx = self.epoch_batches(epoch)[within]
        insts = [self.corpus[i] for i in idx]
        if self.stage.pad_lengths:
            # the whole batch pads to one length drawn from pad_lengths
            target = self.stage.pad_lengths[int(self.rng.integers(len(self.stage.pad_lengths)))]
            clean = [padded_responses(self.corpus[i], target) for i in idx]
        else:
            clean = [self._responses[i] for i in idx]
        if self.stratified:
            ts = [float(t) for t in sample_stratified_noise(self.rng, len(idx))]
        else:
            ts = [float(sample_training_noise(self.rng)) for _ in idx]
        noisy = []
        for rs, t in zip(clean, ts):
            # all responses of an instance share one noise level
            joint = forward_mask(TokenSequence(np.concatenate(rs)), t, self.rng, self.vocab).ids
            noisy.append(np.split(joint, np.cumsum([r.size for r in rs])[:-1]))
        batch = make_batch(insts, clean, noisy, ts, self.model.dims)

        names = self.freeze.names(self.model)
        loss = batch_loss(self.model, batch)
        grads = backward(loss, self.model, trainable=set(names))
        factor = lr_factor(self.step, self.total_steps, self.stage.warmup_fraction)
        lrs = {"projector": self.stage.lr_projector * factor, "backbone": self.stage.lr_backbone * factor}
        optimizer_step(self.model, grads, self.opt, lrs, self.freeze, self.stage.weight_decay)

        value = float(loss.detach())
        self._running.append(value)
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.epoch_losses.append(float(np.mean(self._running)))
            self._running = []
            log.info("%s epoch %d loss %.4f", self.stage.stage, len(self.epoch_losses), self.epoch_losses[-1])
        return value

    def run(self, n_steps: int | None = None) -> list[float]:
        end = self.total_steps if n_steps is None else min(self.total_steps, self.step + n_steps)
        while self.step < end:
            self.train_step()
        return self.epoch_losses

    # -- checkpoint state --------------------------------------------------
    def state_dict(self) -> dict:
        return dict(
            seed=self.seed, step=self.step, stratified=self.stratified, stage=asdict(self.stage) | {"trainable_groups": sorted(self.stage.trainable_groups)},
            rng=self.rng.bit_generator.state, adam_step=self.opt.step,
            epoch_losses=self.epoch_losses, running=self._running,
        )

    def load_state(self, meta: dict, opt_tensors: dict):
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng"]
        self.opt = AdamState(step=int(meta["adam_step"]),
                             m={k[2:]: v for k, v in opt_tensors.items() if k.startswith("m:")},
                             v={k[2:]: v for k, v in opt_tensors.items() if k.startswith("v:")})
        self.epoch_losses = list(meta["epoch_losses"])
        self._running = list(meta["running"])


def evaluate_loss(model: MaskPredictor, corpus, response_length: int = 64, seed: int = 0,
                  batch_size: int = 64) -> float:
    """Training loss with fixed noise draws (same t and masks for every model)."""
    rng = np.random.default_rng([seed, 0xE7A1])
    vocab = Vocab(model.dims.V)
    total, n = 0.0, 0
    corpus = list(corpus)
    for lo in range(0, len(corpus), batch_size):
        insts = corpus[lo: lo + batch_size]
        clean = [padded_responses(inst, response_length) for inst in insts]
        ts = [float(t) for t in sample_stratified_noise(rng, len(insts))]
        noisy = []
        for rs, t in zip(clean, ts):
            joint = forward_mask(TokenSequence(np.concatenate(rs)), t, rng, vocab).ids
            noisy.append(np.split(joint, np.cumsum([r.size for r in rs])[:-1]))
        with torch.no_grad():
            total += float(batch_loss(model, make_batch(insts, clean, noisy, ts, model.dims))) * len(insts)
        n += len(insts)
    return total / n


def train_stage(corpus, model: MaskPredictor, stage: StageConfig, seed: int = 0):
    """Run a whole stage; returns (model, per-epoch mean losses)."""
    trainer = Trainer(model, stage, corpus, seed)
    return model, trainer.run()


# -- checkpoint file format ----------------------------------------------------
#
#   b"MDLM"  u32 version
#   dims block: 8 x u32 (V, D, d, d_ff, n_layers, n_heads, max_len, d_proj)
#   u64 training step
#   u32 n, n bytes of UTF-8 JSON metadata (trainer state incl. rng state)
#   u32 tensor count, then per tensor in model.named_parameters() order,
#       followed by optimizer moments ("m:<name>", "v:<name>"):
#       u16 name length, name, u8 ndim, ndim x u32 shape, float32 data
# all integers and floats little-endian.

MAGIC = b"MDLM"
FORMAT_VERSION = 1
DIM_FIELDS = ("V", "D", "d", "d_ff", "n_layers", "n_heads", "max_len", "d_proj")


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def _tensor_block(name: str, t: torch.Tensor) -> bytes:
    raw = name.encode("utf-8")
    data = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim)
            + struct.pack(f"<{t.ndim}I", *t.shape) + data.tobytes())


def save_checkpoint(path, model: MaskPredictor, trainer: Trainer | None = None, meta: dict | None = None):
    """Atomically write weights (and optional trainer state) to ``path``."""
    if any(p.dtype != torch.float32 for p in model.parameters()):
        raise CheckpointError("checkpoints store float32 weights; convert the model first")
    state = trainer.state_dict() if trainer else {}
    state.update(meta or {})
    header = json.dumps(state, sort_keys=True).encode("utf-8")
    tensors = [(n, p) for n, p in model.named_parameters()]
    if trainer:
        for n, _ in model.named_parameters():
            if n in trainer.opt.m:
                tensors += [("m:" + n, trainer.opt.m[n]), ("v:" + n, trainer.opt.v[n])]
    dims = model.dims
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<8I", *(getattr(dims, f) for f in DIM_FIELDS)),
             struct.pack("<Q", trainer.step if trainer else 0),
             struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    parts += [_tensor_block(n, t) for n, t in tensors]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError("truncated payload")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (model, meta, optimizer tensors)."""
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CorruptHeaderError("corrupt header: bad magic")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        dims = ModelDims(**dict(zip(DIM_FIELDS, r.unpack("<8I"))))
    except TruncatedPayloadError:
        raise
    except ValueError as exc:
        raise CorruptHeaderError(f"corrupt header: {exc}") from None
    (step,) = r.unpack("<Q")
    (n_meta,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n_meta).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"corrupt header: metadata unreadable ({exc})") from None
    meta["step"] = step
    (count,) = r.unpack("<I")
    model = MaskPredictor(dims)
    params = dict(model.named_parameters())
    opt = {}
    seen = set()
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        t = torch.from_numpy(data.astype(np.float32))
        base = name[2:] if name[:2] in ("m:", "v:") else name
        if base not in params or tuple(params[base].shape) != tuple(shape):
            raise CorruptHeaderError(f"corrupt header: unexpected tensor {name} {shape}")
        if base == name:
            with torch.no_grad():
                params[name].copy_(t)
            seen.add(name)
        else:
            opt[name] = t
    if seen != set(params):
        raise TruncatedPayloadError("truncated payload: missing weights")
    if r.pos != len(buf):
        raise CorruptHeaderError("corrupt header: trailing bytes")
    return model, meta, opt


def resume_trainer(path, corpus) -> Trainer:
    model, meta, opt = load_checkpoint(path)
    if "stage" not in meta:
        raise CheckpointError("checkpoint has no trainer state")
    stage_kw = dict(meta["stage"])
    stage_kw["trainable_groups"] = frozenset(stage_kw["trainable_groups"])
    trainer = Trainer(model, StageConfig(**stage_kw), corpus, meta["seed"], meta.get("stratified", True))
    trainer.load_state(meta, opt)
    return trainer
