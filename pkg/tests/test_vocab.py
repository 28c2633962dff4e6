from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocrcap import vocab as V


def test_fixed_vocab_threshold_two():
    caps = [["a", "dog"], ["a", "cat"]]
    voc = V.build_fixed_vocab(caps, min_count=2)
    # brute-force count: only "a" reaches 2
    counts = Counter(t for c in caps for t in c)
    assert set(voc.id_to_token[4:]) == {t for t, k in counts.items() if k >= 2} == {"a"}
    assert voc.id_to_token[:4] == V.SPECIALS


def test_fixed_vocab_threshold_disabled():
    voc = V.build_fixed_vocab([["a", "dog"], ["a", "cat"]], min_count=1)
    # descending frequency, ties lexicographic
    assert voc.id_to_token == V.SPECIALS + ("a", "cat", "dog")


def test_fixed_vocab_empty_corpus():
    with pytest.raises(V.VocabError):
        V.build_fixed_vocab([], min_count=1)
    with pytest.raises(V.VocabError):
        V.build_fixed_vocab([["a"]], min_count=0)


def test_restrict_to_closed_list():
    voc = V.build_fixed_vocab([["a", "acme", "bottle"]] * 3, 1, restrict_to=["a", "bottle"])
    assert "acme" not in voc and "bottle" in voc


def test_filter_stopwords():
    assert V.filter_stopwords(["the", "acme", "of"]) == ["acme"]
    assert V.filter_stopwords([]) == []
    assert V.filter_stopwords(["ACME"]) == ["ACME"]
    assert V.filter_stopwords(["The"]) == []


def test_bundled_stopword_list():
    assert len(V.STOPWORDS) == 127
    assert {"the", "of", "a", "on"} <= V.STOPWORDS


def test_normalize_ocr_token():
    assert V.normalize_ocr_token("Springbourne,") == "springbourne"
    assert V.normalize_ocr_token("7259") == "7259"
    assert V.normalize_ocr_token("!!!") is None
    assert V.normalize_ocr_token("") is None
    assert V.normalize_ocr_token("Nature's") == "nature's"


def test_extend_with_ocr_synthetic():
    base = V.build_fixed_vocab([["a", "bottle"]], 1)
    ext = V.extend_with_ocr(base, [["acme"], ["acme", "zorp"], ["acme"]], threshold=2)
    assert ext.ocr_tokens == ("acme",)
    assert ext.fixed_size == len(base)
    assert ext.lookup("acme") == len(base)
    assert ext.added == 1


def test_extension_skips_fixed_words():
    base = V.build_fixed_vocab([["a", "bottle"]], 1)
    ext = V.extend_with_ocr(base, [["bottle", "acme"]] * 3, threshold=1)
    assert ext.ocr_tokens == ("acme",)
    assert ext.lookup("bottle") < ext.fixed_size


def test_extended_rejects_duplicates_and_stopwords():
    base = V.build_fixed_vocab([["a", "bottle"]], 1)
    with pytest.raises(V.VocabError):
        V.ExtendedVocabulary(base, ("bottle",), (1,), 1)
    with pytest.raises(V.VocabError):
        V.ExtendedVocabulary(base, ("zorp", "zorp"), (1, 1), 1)
    with pytest.raises(V.VocabError):
        V.ExtendedVocabulary(base, ("the",), (1,), 1)


def test_round_trip_and_oov():
    voc = V.build_fixed_vocab([["a", "dog", "on", "a", "mat"]], 1)
    toks = ["a", "dog", "on", "mat"]
    assert voc.decode(voc.encode(toks)) == toks
    assert voc.encode(["zebra"]) == [V.UNK_ID]


def test_file_format(tmp_path):
    base = V.build_fixed_vocab([["a", "a", "dog"]], 1)
    ext = V.extend_with_ocr(base, [["acme"], ["acme"]], 2)
    path = tmp_path / "vocab.txt"
    V.save_vocab(path, ext)
    lines = path.read_text().splitlines()
    assert lines[:4] == ["<pad>\t0", "<bos>\t0", "<eos>\t0", "<unk>\t0"]
    assert lines[4:6] == ["a\t2", "dog\t1"]
    assert lines[7] == "acme\t2"
    loaded = V.load_vocab(path)
    assert loaded == ext
    assert V.vocab_hash(loaded) == V.vocab_hash(ext)


def test_malformed_vocab_file():
    with pytest.raises(V.VocabError):
        V.loads_vocab("<pad>\t0\n")
    with pytest.raises(V.VocabError):
        V.loads_vocab("<pad>\t0\n<bos>\t0\n<eos>\t0\n<unk>\t0\nbad line\n")


words = st.sampled_from(["acme", "zorp", "quix", "blent", "a", "bottle", "7259", "nimbo"])
corpora = st.lists(st.lists(words, max_size=5), max_size=12)


@settings(max_examples=100, deadline=None)
@given(corpora, st.integers(1, 4), st.integers(1, 4))
def test_threshold_monotonicity(corpus, t1, t2):
    t1, t2 = min(t1, t2), max(t1, t2)
    base = V.build_fixed_vocab([["a", "bottle"]], 1)
    low = V.extend_with_ocr(base, corpus, t1)
    high = V.extend_with_ocr(base, corpus, t2)
    assert set(high.ocr_tokens) <= set(low.ocr_tokens)
    assert low.fixed_size == high.fixed_size == len(base)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=6), min_size=1, max_size=10), st.integers(1, 3))
def test_deterministic_bytes(captions, k):
    a = V.dumps_vocab(V.build_fixed_vocab(captions, k))
    b = V.dumps_vocab(V.build_fixed_vocab(list(reversed(captions)), k))
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=6), min_size=1, max_size=10), st.integers(1, 3))
def test_every_token_meets_threshold(captions, k):
    voc = V.build_fixed_vocab(captions, k)
    counts = Counter(t for c in captions for t in c)
    assert all(counts[t] >= k for t in voc.id_to_token[4:])
    assert all(voc.id_to_token[voc.token_to_id[t]] == t for t in voc.id_to_token)


def test_tokenize():
    assert V.tokenize("A bottle, of Water.") == ["a", "bottle", ",", "of", "water", "."]
