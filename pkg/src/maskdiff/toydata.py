"""Synthetic toy-VQA corpora: images are bundles of four attributes.

An image's feature vector is the normalized sum of one prototype vector per
attribute value plus Gaussian noise, so the attributes are recoverable from
the features but no single coordinate names them.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import DialogueInstance, tokenize
from .data import synthetic_feature_provider, write_corpus, write_features

ATTRIBUTES = {
    "color": ("red", "green", "blue", "yellow"),
    "shape": ("circle", "square", "triangle", "star"),
    "size": ("small", "large"),
    "side": ("left", "right", "top", "bottom"),
}
CLOSED_ANSWERS = ("yes", "no")


@dataclass(frozen=True)
class ToyImage:
    image_id: str
    attrs: dict
    features: np.ndarray


@lru_cache(maxsize=None)
def prototypes(D: int) -> dict:
    """One unit vector per attribute value, keyed "kind=value".

    When D allows it the vectors are orthonormalized, so each attribute can be
    read off the features without cross-talk from the others.
    """
    keys = [f"{k}={v}" for k, vals in ATTRIBUTES.items() for v in vals]
    raw = np.stack([synthetic_feature_provider(key, D) for key in keys])
    if D >= len(keys):
        q, r = np.linalg.qr(raw.T)
        raw = (q * np.sign(np.diag(r))).T
    return dict(zip(keys, raw))


def make_image(image_id: str, rng: np.random.Generator, D: int, noise: float = 0.1) -> ToyImage:
    attrs = {k: vals[rng.integers(len(vals))] for k, vals in ATTRIBUTES.items()}
    protos = prototypes(D)
    v = sum(protos[f"{k}={a}"] for k, a in attrs.items())
    v = v + noise * rng.standard_normal(D)
    return ToyImage(image_id, attrs, v / np.linalg.norm(v))


def caption(img: ToyImage) -> str:
    a = img.attrs
    return f"a {a['size']} {a['color']} {a['shape']} on the {a['side']}"


def _phrase(kind: str, value: str) -> str:
    return {"color": value, "shape": f"a {value}", "size": value, "side": f"on the {value}"}[kind]


def closed_question(img: ToyImage, rng) -> tuple[str, str]:
    kind = list(ATTRIBUTES)[rng.integers(len(ATTRIBUTES))]
    truth = img.attrs[kind]
    if rng.random() < 0.5:
        value, answer = truth, "yes"
    else:
        others = [v for v in ATTRIBUTES[kind] if v != truth]
        value, answer = others[rng.integers(len(others))], "no"
    return f"is it {_phrase(kind, value)}?", answer


def choice_question(img: ToyImage, rng) -> tuple[str, str]:
    """Asks "is it X or Y?" with exactly one option true; the answer names it."""
    kind = list(ATTRIBUTES)[rng.integers(len(ATTRIBUTES))]
    truth = img.attrs[kind]
    others = [v for v in ATTRIBUTES[kind] if v != truth]
    options = [truth, others[rng.integers(len(others))]]
    if rng.random() < 0.5:
        options.reverse()
    return f"is it {_phrase(kind, options[0])} or {_phrase(kind, options[1])}?", truth


def open_question(img: ToyImage, rng) -> tuple[str, str]:
    kind = rng.integers(4)
    if kind == 0:
        return "what color is it?", img.attrs["color"]
    if kind == 1:
        return "what shape is it?", img.attrs["shape"]
    if kind == 2:
        return choice_question(img, rng)
    # several valid orderings: the answer distribution is multimodal
    words = [img.attrs[k] for k in ATTRIBUTES]
    order = rng.permutation(len(words))
    return "list its attributes.", " ".join(words[i] for i in order)


def _instance(img, pairs):
    return DialogueInstance(
        turns=tuple((tokenize(p), tokenize(r)) for p, r in pairs),
        visual_features=img.features, image_id=img.image_id,
    )


def make_images(n: int, rng, D: int, prefix: str, noise: float = 0.1) -> list:
    return [make_image(f"{prefix}{i:05d}", rng, D, noise) for i in range(n)]


def single_turn(img, rng, closed_fraction=0.5):
    q, a = closed_question(img, rng) if rng.random() < closed_fraction else open_question(img, rng)
    return _instance(img, [(q, a)])


def multi_turn(img, rng, turns=3):
    pairs = []
    for _ in range(turns):
        pairs.append(closed_question(img, rng) if rng.random() < 0.5 else open_question(img, rng))
    return _instance(img, pairs)


def alignment_pair(img):
    return _instance(img, [("", caption(img))])


@dataclass
class ToyCorpus:
    alignment: list
    dialogue: list
    train: list
    test: list
    features: dict


def build_toy_corpus(seed: int = 0, D: int = 16, n_train_images: int = 500, n_test_images: int = 100,
                     n_train: int = 2000, n_test: int = 400, n_dialogue: int = 600,
                     noise: float = 0.1) -> ToyCorpus:
    """Alignment captions, multi-turn dialogues, and single-turn train/test VQA.

    Test questions are asked about held-out images only.
    """
    rng = np.random.default_rng(seed)
    train_imgs = make_images(n_train_images, rng, D, "tr", noise)
    test_imgs = make_images(n_test_images, rng, D, "te", noise)
    pick = lambda imgs: imgs[rng.integers(len(imgs))]  # noqa: E731
    return ToyCorpus(
        alignment=[alignment_pair(img) for img in train_imgs],
        dialogue=[multi_turn(pick(train_imgs), rng) for _ in range(n_dialogue)],
        train=[single_turn(pick(train_imgs), rng) for _ in range(n_train)],
        test=[single_turn(pick(test_imgs), rng) for _ in range(n_test)],
        features={img.image_id: img.features for img in train_imgs + test_imgs},
    )


def write_toy_corpus(out_dir, corpus: ToyCorpus) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.tsv" for name in ("alignment", "dialogue", "train", "test")}
    for name, path in paths.items():
        write_corpus(path, getattr(corpus, name))
    paths["features"] = out / "features.tsv"
    write_features(paths["features"], corpus.features)
    return paths


def copy_corpus(n: int = 256, seed: int = 0, min_len: int = 3, max_len: int = 8) -> list:
    """Text-only instances whose response repeats the prompt (lowercase letters)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = "".join(chr(97 + c) for c in rng.integers(0, 26, rng.integers(min_len, max_len + 1)))
        out.append(DialogueInstance(turns=((tokenize(s), tokenize(s)),)))
    return out
