from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from portalm.errors import ValidationError
from portalm.tokenizer import (
    BOS_ID,
    PAD_ID,
    RSEP_ID,
    UNK_ID,
    RESERVED_TOKENS,
    Vocabulary,
    build_vocab,
    denumericalize,
    numericalize,
    tokenize,
)

from .conftest import make_corpus


class TestTokenize:
    def test_clitic_and_punct(self):
        assert tokenize("I'm fine.") == ["i", "'m", "fine", "."]

    def test_empty(self):
        assert tokenize("") == []

    def test_casefold_and_whitespace(self):
        assert tokenize("Hello   hello") == ["hello", "hello"]

    def test_leading_punct(self):
        assert tokenize('"quoted"') == ['"', "quoted", '"']

    def test_stacked_clitics(self):
        assert tokenize("he'd've") == ["he", "'d", "'ve"]

    def test_nt_contraction(self):
        assert tokenize("don't stop") == ["do", "n't", "stop"]

    def test_reserved_symbol_passes_through(self):
        assert tokenize("a <rsep> b.") == ["a", "<rsep>", "b", "."]

    def test_all_punct_token(self):
        assert tokenize("--") == ["-", "-"]

    @given(st.text(max_size=80))
    def test_deterministic_and_total(self, text):
        assert tokenize(text) == tokenize(text)

    @given(st.text(max_size=80))
    def test_no_whitespace_in_tokens(self, text):
        for tok in tokenize(text):
            assert tok
            assert not any(ch.isspace() for ch in tok)


class TestBuildVocab:
    def test_frequency_order(self):
        corpus = make_corpus([[3]], texts=("a a b",))
        vocab = build_vocab(corpus, max_size=10, min_freq=1)
        assert "a" in vocab and "b" in vocab
        assert vocab.id("a") < vocab.id("b")

    def test_min_freq_excludes(self):
        corpus = make_corpus([[3]], texts=("a a b",))
        vocab = build_vocab(corpus, max_size=10, min_freq=2)
        assert "b" not in vocab
        assert vocab.id("b") == UNK_ID

    def test_truncation(self):
        corpus = make_corpus([[3]], texts=("t0 t1 t2 t3 t4 t5 t6 t7 t8 t9",))
        vocab = build_vocab(corpus, max_size=5, min_freq=1)
        assert vocab.size == 5
        assert vocab.id_to_token[:4] == list(RESERVED_TOKENS)

    def test_reserved_ids_fixed(self):
        corpus = make_corpus([[3]], texts=("x",))
        vocab = build_vocab(corpus, max_size=100)
        assert vocab.id("<pad>") == PAD_ID == 0
        assert vocab.id("<unk>") == UNK_ID == 1
        assert vocab.id("<bos>") == BOS_ID == 2
        assert vocab.id("<rsep>") == RSEP_ID == 3

    def test_empty_corpus_warns(self):
        corpus = make_corpus([], texts=("x",))
        with pytest.warns(UserWarning):
            vocab = build_vocab(corpus, max_size=10)
        assert vocab.size == len(RESERVED_TOKENS)

    def test_max_size_too_small(self):
        corpus = make_corpus([[3]], texts=("x",))
        with pytest.raises(ValidationError):
            build_vocab(corpus, max_size=4)

    def test_rebuild_stable(self):
        corpus = make_corpus([[3], [12]], texts=("b a c a b e d",))
        v1 = build_vocab(corpus, max_size=50)
        v2 = build_vocab(corpus, max_size=50)
        assert v1.token_to_id == v2.token_to_id

    def test_no_id_collisions(self):
        corpus = make_corpus([[3]], texts=("the quick brown fox jumps over the lazy dog",))
        vocab = build_vocab(corpus, max_size=50)
        for tok, idx in vocab.token_to_id.items():
            assert vocab.id_to_token[idx] == tok
        assert sorted(vocab.token_to_id.values()) == list(range(vocab.size))


class TestNumericalize:
    def test_oov_maps_to_unk(self):
        corpus = make_corpus([[3]], texts=("a a",))
        vocab = build_vocab(corpus, max_size=10)
        assert numericalize(["a", "zzz"], vocab) == [vocab.id("a"), UNK_ID]

    def test_empty(self):
        corpus = make_corpus([[3]], texts=("a",))
        vocab = build_vocab(corpus, max_size=10)
        assert numericalize([], vocab) == []

    def test_round_trip_in_vocab(self):
        corpus = make_corpus([[3]], texts=("alpha beta gamma",))
        vocab = build_vocab(corpus, max_size=10)
        tokens = tokenize("beta gamma alpha")
        assert denumericalize(numericalize(tokens, vocab), vocab) == tokens

    def test_length_preserved(self):
        corpus = make_corpus([[3]], texts=("a b",))
        vocab = build_vocab(corpus, max_size=10)
        tokens = ["a", "q", "b", "q"]
        assert len(numericalize(tokens, vocab)) == len(tokens)


class TestPersistence:
    def test_json_round_trip(self, tmp_path):
        corpus = make_corpus([[3]], texts=("alpha beta beta",))
        vocab = build_vocab(corpus, max_size=10, min_freq=1)
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.token_to_id == vocab.token_to_id
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.content_hash() == vocab.content_hash()
