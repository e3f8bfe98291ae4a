"""Corpus files, feature tables and the deterministic synthetic feature provider.

Dialogue corpus lines look like::

    image_id<TAB>prompt<TAB>response[<TAB>prompt<TAB>response ...]

with backslash, tab and newline inside fields written as ``\\\\``, ``\\t`` and
``\\n``. Feature tables hold ``image_id<TAB>v1<TAB>...<TAB>vD`` per line.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DialogueInstance, TokenSequence, Vocab, detokenize, tokenize

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MODES = ("plain", "dialogue", "alignment")


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFF_FFFF_FFFF_FFFF
    return h


def synthetic_feature_provider(image_id: str, D: int) -> np.ndarray:
    """Unit-norm pseudo-random D-vector seeded by FNV-1a of the id's UTF-8 bytes."""
    if D < 1:
        raise ValueError("D must be >= 1")
    rng = np.random.Generator(np.random.PCG64(fnv1a_64(image_id.encode("utf-8"))))
    v = rng.standard_normal(D)
    return v / np.linalg.norm(v)


def escape_field(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def unescape_field(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        c = s[i]
        if c == "\\" and i + 1 < len(s):
            nxt = s[i + 1]
            out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _lines(path):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line:
                yield lineno, line


def load_features(path) -> dict:
    table, dim = {}, None
    for lineno, line in _lines(path):
        fields = line.split("\t")
        try:
            vec = np.array([float(v) for v in fields[1:]], dtype=np.float64)
        except ValueError as exc:
            raise CorpusFormatError(path, lineno, f"bad feature value ({exc})") from None
        if vec.size == 0:
            raise CorpusFormatError(path, lineno, "record has no feature values")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise CorpusFormatError(path, lineno, f"feature dimension {vec.size} != {dim}")
        table[unescape_field(fields[0])] = vec
    return table


def write_features(path, table: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, vec in table.items():
            fh.write("\t".join([escape_field(key)] + [repr(float(v)) for v in vec]) + "\n")


def resolve_features(image_id: str, D: int, table: Optional[dict] = None) -> np.ndarray:
    if table and image_id in table:
        vec = table[image_id]
        if vec.size != D:
            raise ValueError(f"feature table dimension {vec.size} != D={D}")
        return vec
    return synthetic_feature_provider(image_id, D)


def load_corpus(path, mode: str = "dialogue", features=None, D: int = 16, vocab: Vocab = Vocab()):
    """Read a corpus file.

    ``plain`` returns TokenSequences (one per line). ``dialogue`` returns
    DialogueInstances with features attached from ``features`` (a path or a
    dict) or the synthetic provider. ``alignment`` keeps only the first
    response of each record and drops the prompt.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "plain":
        return [tokenize(unescape_field(line), vocab) for _, line in _lines(path)]
    table = load_features(features) if isinstance(features, (str, os.PathLike)) else features
    if table:
        dims = {v.size for v in table.values()}
        if dims != {D}:
            raise ValueError(f"feature table dimension {sorted(dims)} does not match D={D}")
    out = []
    for lineno, line in _lines(path):
        fields = [unescape_field(f) for f in line.split("\t")]
        if len(fields) < 3 or (len(fields) - 1) % 2:
            raise CorpusFormatError(path, lineno, "expected image_id then prompt/response pairs")
        image_id, rest = fields[0], fields[1:]
        pairs = list(zip(rest[0::2], rest[1::2]))
        if any(not r for _, r in pairs):
            raise CorpusFormatError(path, lineno, "empty response")
        if mode == "alignment":
            pairs = [("", pairs[0][1])]
        feats = resolve_features(image_id, D, table) if image_id else None
        out.append(DialogueInstance(
            turns=tuple((tokenize(p, vocab), tokenize(r, vocab)) for p, r in pairs),
            visual_features=feats, image_id=image_id,
        ))
    return out


def write_corpus(path, instances, vocab: Vocab = Vocab()):
    """Write TokenSequences (plain) or DialogueInstances (dialogue) to ``path``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            if isinstance(inst, TokenSequence):
                fh.write(escape_field(detokenize(inst, vocab)) + "\n")
                continue
            fields = [inst.image_id]
            for p, r in inst.turns:
                fields += [detokenize(p, vocab), detokenize(r, vocab)]
            fh.write("\t".join(escape_field(f) for f in fields) + "\n")
