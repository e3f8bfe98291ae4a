import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdiff.core import DialogueInstance, TokenSequence, tokenize
from maskdiff.data import (
    CorpusFormatError, escape_field, fnv1a_64, load_corpus, load_features, synthetic_feature_provider,
    unescape_field, write_corpus, write_features,
)
from maskdiff.toydata import ATTRIBUTES, build_toy_corpus, prototypes, write_toy_corpus


def test_fnv1a_known_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_provider_is_stable_and_unit_norm():
    a = synthetic_feature_provider("img1", 16)
    assert np.array_equal(a, synthetic_feature_provider("img1", 16))
    assert abs(np.linalg.norm(a) - 1) < 1e-6
    assert not np.array_equal(a, synthetic_feature_provider("img2", 16))
    # pinned values guard against silent changes of hash or generator
    rng = np.random.Generator(np.random.PCG64(fnv1a_64("img1".encode())))
    v = rng.standard_normal(16)
    assert np.array_equal(a, v / np.linalg.norm(v))
    with pytest.raises(ValueError):
        synthetic_feature_provider("x", 0)


def test_provider_concentration():
    D = 16
    X = np.stack([synthetic_feature_provider(f"id-{i}", D) for i in range(10_000)])
    total, pairs = 0.0, 0
    for lo in range(0, len(X), 1000):
        G = np.abs(X[lo: lo + 1000] @ X.T)
        for k in range(G.shape[0]):
            row = lo + k
            total += G[k, row + 1:].sum()
            pairs += len(X) - row - 1
    assert total / pairs < 3 / np.sqrt(D)


@given(st.text())
def test_escape_round_trip(s):
    e = escape_field(s)
    assert "\t" not in e and "\n" not in e and "\r" not in e
    assert unescape_field(e) == s


def test_empty_file(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("")
    assert load_corpus(p) == []
    assert load_corpus(p, "plain") == []


def test_one_record(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("img1\twhat color?\tblue\n")
    (inst,) = load_corpus(p)
    assert len(inst.turns) == 1
    assert inst.prompt == tokenize("what color?") and inst.response == tokenize("blue")
    assert np.array_equal(inst.visual_features, synthetic_feature_provider("img1", 16))
    (al,) = load_corpus(p, "alignment")
    assert len(al.prompt) == 0 and al.response == tokenize("blue")


def test_multi_turn_and_plain(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("im\tq1\ta1\tq2\ta2\n")
    (inst,) = load_corpus(p)
    assert [(a.tolist(), b.tolist()) for a, b in inst.turns] == [
        (tokenize("q1").tolist(), tokenize("a1").tolist()), (tokenize("q2").tolist(), tokenize("a2").tolist())]
    (al,) = load_corpus(p, "alignment")
    assert len(al.turns) == 1 and al.response == tokenize("a1")
    p.write_text("hello\\tworld\nsecond\n")
    assert load_corpus(p, "plain") == [tokenize("hello\tworld"), tokenize("second")]


@pytest.mark.parametrize("line,lineno", [("img\tq\n", 1), ("a\tb\tc\nimg\tq\t\n", 2), ("x\ty\tz\tw\n", 1)])
def test_malformed_lines_report_line_number(tmp_path, line, lineno):
    p = tmp_path / "bad.tsv"
    p.write_text(line)
    with pytest.raises(CorpusFormatError, match=f":{lineno}:") as info:
        load_corpus(p)
    assert info.value.lineno == lineno


def test_feature_table(tmp_path):
    f = tmp_path / "f.tsv"
    write_features(f, {"a": np.arange(16) / 10.0})
    c = tmp_path / "c.tsv"
    c.write_text("a\tq\tr\nb\tq\tr\n")
    a, b = load_corpus(c, features=f)
    assert np.array_equal(a.visual_features, np.arange(16) / 10.0)
    assert np.array_equal(b.visual_features, synthetic_feature_provider("b", 16))
    with pytest.raises(ValueError, match="dimension"):
        load_corpus(c, features=f, D=8)
    f.write_text("a\t1\t2\nb\t1\n")
    with pytest.raises(CorpusFormatError, match=":2:"):
        load_features(f)


_field = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)


def _random_instance(rng, alphabet):
    def text(lo, hi):
        return "".join(rng.choice(alphabet, rng.integers(lo, hi)))

    turns = tuple((tokenize(text(0, 10)), tokenize(text(1, 10))) for _ in range(rng.integers(1, 4)))
    image_id = "img" + text(1, 6)
    return DialogueInstance(turns=turns, visual_features=synthetic_feature_provider(image_id, 16), image_id=image_id)


def test_round_trip_1000_instances(tmp_path):
    rng = np.random.default_rng(0)
    alphabet = list("abc xyz\t\\\n\r?é漢") + ["\U0001f600"]
    instances = [_random_instance(rng, alphabet) for _ in range(1000)]
    p = tmp_path / "c.tsv"
    write_corpus(p, instances)
    assert load_corpus(p) == instances


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(_field, _field.filter(bool)), min_size=1, max_size=3))
def test_round_trip_property(tmp_path_factory, turns):
    inst = DialogueInstance(turns=tuple((tokenize(p), tokenize(r)) for p, r in turns),
                            visual_features=synthetic_feature_provider("i", 16), image_id="i")
    p = tmp_path_factory.mktemp("rt") / "c.tsv"
    write_corpus(p, [inst])
    assert load_corpus(p) == [inst]


def test_plain_round_trip(tmp_path):
    seqs = [tokenize(s) for s in ["one", "two\tthree", "back\\slash"]]
    p = tmp_path / "p.txt"
    write_corpus(p, seqs)
    assert load_corpus(p, "plain") == seqs


def test_toy_corpus_shape_and_files(tmp_path):
    c = build_toy_corpus(seed=0, n_train_images=20, n_test_images=5, n_train=50, n_test=10, n_dialogue=8)
    assert len(c.train) == 50 and len(c.test) == 10 and len(c.dialogue) == 8 and len(c.alignment) == 20
    assert {i.image_id for i in c.test}.isdisjoint({i.image_id for i in c.train})
    assert all(len(d.turns) == 3 for d in c.dialogue)
    assert all(len(a.prompt) == 0 for a in c.alignment)
    for inst in c.train:
        assert abs(np.linalg.norm(inst.visual_features) - 1) < 1e-12
    paths = write_toy_corpus(tmp_path, c)
    assert load_corpus(paths["test"], features=paths["features"]) == c.test
    assert load_corpus(paths["alignment"], "alignment", features=paths["features"]) == c.alignment


def test_toy_features_encode_attributes():
    # the closest prototype of each kind names the attribute
    c = build_toy_corpus(seed=1, n_train_images=50, n_test_images=0, n_train=0, n_test=0, n_dialogue=0)
    for inst in c.alignment:
        text = bytes(inst.response.ids.astype(np.uint8)).decode()
        for kind, values in ATTRIBUTES.items():
            scores = [inst.visual_features @ prototypes(16)[f"{kind}={v}"] for v in values]
            assert values[int(np.argmax(scores))] in text.split()


def test_token_sequence_equality_is_by_value():
    assert TokenSequence([1, 2]) == TokenSequence(np.array([1, 2]))
