"""Tests for the tokenizer and data pipeline."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codemoe import data as D
from codemoe.data import (DataError, GENERIC_TAG, PAD, PY_TAG, END_OF_TEXT,
                          SPECIAL_TOKENS, Tokenizer, TranslationPair,
                          TranslationSample, build_moe_dataset, build_sample,
                          detokenize_python, generate_toy_corpus,
                          ingest_xlcost, pad_batch, read_pairs,
                          serialize_python, write_pairs)
from codemoe.toylang import SOURCE_LANGS

TEXTS = ["x = ( 1 + 2 ) NEWLINE print ( x ) NEWLINE",
         "int y = 7 ; cout << ( y ) << endl ;",
         "let z = 3 console.log ( z )"]


@pytest.fixture(scope="module")
def tok():
    return Tokenizer.train(TEXTS, n_merges=64)


def make_pair(lang="cpp", src="int x = 1 ;", py="x = 1 NEWLINE"):
    return TranslationPair(src_lang=lang, src_code=src, py_code=py)


# -- tokenizer ----------------------------------------------------------------


def test_round_trip_on_training_texts(tok):
    for text in TEXTS:
        assert tok.decode(tok.encode(text)) == text


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("x y = ( ) 1 2 + print NEWLINE int ; let".split()),
                min_size=1, max_size=30))
def test_round_trip_on_known_words(words):
    tok = Tokenizer.train(TEXTS, n_merges=64)
    text = " ".join(words)
    assert tok.decode(tok.encode(text)) == text


def test_special_tokens_are_atomic(tok):
    for sp in SPECIAL_TOKENS:
        ids = tok.encode(sp)
        assert ids == [tok.token_id(sp)], f"{sp} split into {len(ids)} ids"


def test_tokenizer_save_load_round_trip(tok, tmp_path):
    path = str(tmp_path / "tok.json")
    tok.save(path)
    loaded = Tokenizer.load(path)
    assert loaded.vocab_size == tok.vocab_size
    for text in TEXTS:
        assert loaded.encode(text) == tok.encode(text)


def test_unknown_characters_rejected(tok):
    with pytest.raises(DataError):
        tok.encode("étoile")


# -- sample construction ------------------------------------------------------


def test_build_sample_layout(tok):
    pair = make_pair()
    s = build_sample(pair, tok)
    assert s.ids[0] == tok.token_id("<cpp>")
    assert s.ids[-1] == tok.token_id(END_OF_TEXT)
    assert tok.token_id(PY_TAG) in s.ids
    assert s.loss_mask == [1] * len(s.ids)


def test_build_sample_generic_tag_starts_with_code_token(tok):
    s = build_sample(make_pair(), tok, tag_mode="generic")
    assert s.ids[0] == tok.token_id(GENERIC_TAG)


def test_build_sample_target_loss_mask(tok):
    pair = make_pair()
    s = build_sample(pair, tok, loss_on="target")
    split = s.ids.index(tok.token_id(PY_TAG)) + 1
    assert s.loss_mask[:split] == [0] * split
    assert s.loss_mask[split:] == [1] * (len(s.ids) - split)


def test_build_sample_source_loss_mask(tok):
    pair = make_pair()
    s = build_sample(pair, tok, loss_on="source")
    split = s.ids.index(tok.token_id(PY_TAG)) + 1
    # loss covers the source tokens and the <py> boundary, nothing else
    assert s.loss_mask == [0] + [1] * (split - 1) + [0] * (len(s.ids) - split)
    # source and target partition the predictable positions (0 is never
    # a prediction target: the loss pairs mask[i] with predicting ids[i])
    full = build_sample(pair, tok, loss_on="full")
    tgt = build_sample(pair, tok, loss_on="target")
    union = [a | b for a, b in zip(s.loss_mask, tgt.loss_mask)]
    assert union[1:] == full.loss_mask[1:]
    assert not any(a & b for a, b in zip(s.loss_mask, tgt.loss_mask))


def test_build_sample_context_overflow_rejected(tok):
    with pytest.raises(DataError):
        build_sample(make_pair(), tok, context_len=4)


# -- pad_batch ----------------------------------------------------------------


def _samples_of_lengths(lengths):
    return [TranslationSample(ids=[1] * n, loss_mask=[1] * n, tag="<cpp>")
            for n in lengths]


def test_pad_batch_drops_exactly_ceil_five_percent():
    samples = _samples_of_lengths(range(1, 41))  # N=40 -> ceil(2.0)=2 dropped
    ids, mask, report = pad_batch(samples, pad_id=0)
    assert len(report["dropped"]) == 2
    assert report["dropped"] == [38, 39]
    assert ids.shape == (38, 38)


def test_pad_batch_equal_lengths_drops_nothing():
    ids, mask, report = pad_batch(_samples_of_lengths([7] * 10), pad_id=0)
    assert report["dropped"] == []
    assert ids.shape == (10, 7)
    assert (mask == 1).all()


def test_pad_batch_keeps_at_least_one():
    ids, _, report = pad_batch(_samples_of_lengths([5]), pad_id=0)
    assert report["kept"] == [0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=60), min_size=1, max_size=60))
def test_pad_batch_drop_bound_property(lengths):
    samples = _samples_of_lengths(lengths)
    ids, mask, report = pad_batch(samples, pad_id=0)
    n = len(lengths)
    assert len(report["dropped"]) <= math.ceil(0.05 * n)
    assert len(report["kept"]) >= 1
    # every kept sample is no longer than every dropped one
    if report["dropped"]:
        assert max(lengths[i] for i in report["kept"]) <= min(
            lengths[i] for i in report["dropped"])
    assert ids.shape[1] == max(lengths[i] for i in report["kept"])


def test_pad_batch_pads_with_pad_id_and_zero_mask():
    ids, mask, _ = pad_batch(_samples_of_lengths([3, 5, 5]), pad_id=9)
    assert list(ids[0]) == [1, 1, 1, 9, 9]
    assert list(mask[0]) == [1, 1, 1, 0, 0]


# -- MoE dataset balancing ----------------------------------------------------


def test_moe_dataset_table_sizes_give_15015():
    sizes = {"cpp": 9139, "csharp": 8826, "js": 8991, "java": 8182, "php": 3003}
    corpora = {lang: [make_pair(lang)] * n for lang, n in sizes.items()}
    out = build_moe_dataset(corpora)
    assert len(out) == 15015
    assert len(out) == 5 * 3003


def test_moe_dataset_singletons():
    corpora = {lang: [make_pair(lang)] for lang in SOURCE_LANGS}
    assert len(build_moe_dataset(corpora)) == 5


def test_moe_dataset_max_per_lang_caps_each_language():
    corpora = {lang: [make_pair(lang)] * 10 for lang in SOURCE_LANGS}
    assert len(build_moe_dataset(corpora, max_per_lang=4)) == 20
    # a cap above the minimum size changes nothing
    assert len(build_moe_dataset(corpora, max_per_lang=99)) == 50
    with pytest.raises(DataError):
        build_moe_dataset(corpora, max_per_lang=0)


def test_moe_dataset_rejects_missing_or_empty_language():
    with pytest.raises(DataError):
        build_moe_dataset({lang: [make_pair(lang)] for lang in SOURCE_LANGS[:4]})
    corpora = {lang: [make_pair(lang)] for lang in SOURCE_LANGS}
    corpora["php"] = []
    with pytest.raises(DataError):
        build_moe_dataset(corpora)


# -- corpus generation --------------------------------------------------------


def test_corpus_same_seed_is_byte_identical():
    a = generate_toy_corpus(3, 12)
    b = generate_toy_corpus(3, 12)
    for lang in SOURCE_LANGS:
        assert [(p.src_code, p.py_code) for p in a[lang]] == \
               [(p.src_code, p.py_code) for p in b[lang]]
    assert a["py"] == b["py"]


def test_corpus_different_seeds_differ():
    a = generate_toy_corpus(3, 12)
    b = generate_toy_corpus(4, 12)
    assert [p.src_code for p in a["cpp"]] != [p.src_code for p in b["cpp"]]


def test_corpus_has_snippets_and_programs():
    corpus = generate_toy_corpus(5, 8)
    for lang in SOURCE_LANGS:
        assert len(corpus[lang]) == 8
        for pair in corpus[lang]:
            assert pair.granularity == "program"
            assert pair.snippets, "every program carries aligned snippets"
            for s in pair.snippets:
                assert s.granularity == "snippet"


def test_pairs_jsonl_round_trip(tmp_path):
    corpus = generate_toy_corpus(5, 6)
    path = str(tmp_path / "pairs.jsonl")
    write_pairs(path, corpus["java"])
    back = read_pairs(path, "java")
    assert [(p.src_code, p.py_code) for p in back] == \
           [(p.src_code, p.py_code) for p in corpus["java"]]
    assert [len(p.snippets) for p in back] == \
           [len(p.snippets) for p in corpus["java"]]


def test_ingest_xlcost(tmp_path):
    src = tmp_path / "src.txt"
    py = tmp_path / "py.txt"
    src.write_text("int a = 1 ;\nint b = 2 ;\n")
    py.write_text("a = 1 NEWLINE\nb = 2 NEWLINE\n")
    records = ingest_xlcost(str(src), str(py), "cpp")
    assert records == [{"cpp": "int a = 1 ;", "py": "a = 1 NEWLINE"},
                       {"cpp": "int b = 2 ;", "py": "b = 2 NEWLINE"}]
    src.write_text("")
    py.write_text("")
    assert ingest_xlcost(str(src), str(py), "cpp") == []
    src.write_text("one ;\n")
    with pytest.raises(DataError):
        ingest_xlcost(str(src), str(py), "cpp")


# -- detokenization -----------------------------------------------------------


def test_detokenize_simple_lines():
    assert detokenize_python("a NEWLINE b") == "a\nb"


def test_detokenize_indentation_round_trip():
    text = ("x = 1 NEWLINE if ( x < 2 ) : NEWLINE INDENT print ( x ) "
            "NEWLINE DEDENT")
    detok = detokenize_python(text)
    assert detok == "x = 1\nif ( x < 2 ) :\n    print ( x )"
    assert serialize_python(detok) == text


def test_detokenize_unbalanced_dedent_rejected():
    with pytest.raises(DataError):
        detokenize_python("DEDENT")
