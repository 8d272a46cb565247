from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portalm.corpus import (
    Corpus,
    ConsistencyLabel,
    Demographics,
    DepressionClass,
    binarize_phq,
    bucket_for_age,
    corpus_stats,
    label_subject_consistency,
    load_corpus,
    partition_speaker_disjoint,
    save_corpus,
    session_text,
)
from portalm.errors import CorpusFormatError, DegenerateInputError, ValidationError

from .conftest import make_corpus, make_session, make_subject


class TestBinarize:
    def test_cutoff_boundary(self):
        assert binarize_phq(10) is DepressionClass.DEP_PLUS
        assert binarize_phq(9) is DepressionClass.DEP_MINUS

    def test_extremes(self):
        assert binarize_phq(0) is DepressionClass.DEP_MINUS
        assert binarize_phq(24) is DepressionClass.DEP_PLUS

    @pytest.mark.parametrize("score", [-1, 25, 100])
    def test_out_of_range(self, score):
        with pytest.raises(ValidationError):
            binarize_phq(score)

    @given(a=st.integers(0, 24), b=st.integers(0, 24))
    def test_monotone(self, a, b):
        if a <= b:
            assert binarize_phq(a) <= binarize_phq(b)


class TestConsistency:
    def test_both_positive_is_consistent(self):
        subj = make_subject("s", [12, 15])
        assert label_subject_consistency(subj) is ConsistencyLabel.CONSISTENT

    def test_mixed_is_inconsistent(self):
        subj = make_subject("s", [12, 4])
        assert label_subject_consistency(subj) is ConsistencyLabel.INCONSISTENT

    def test_single_session_consistent(self):
        subj = make_subject("s", [4])
        assert label_subject_consistency(subj) is ConsistencyLabel.CONSISTENT

    def test_zero_sessions_rejected(self):
        subj = make_subject("s", [])
        with pytest.raises(ValidationError):
            label_subject_consistency(subj)

    @given(scores=st.lists(st.integers(0, 24), min_size=1, max_size=6))
    def test_partition_of_subjects(self, scores):
        subj = make_subject("s", scores)
        label = label_subject_consistency(subj)
        if label is ConsistencyLabel.INCONSISTENT:
            assert len(scores) >= 2
            classes = {binarize_phq(s) for s in scores}
            assert len(classes) == 2


class TestLoadSave:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.jsonl"
        records = [
            {"session_id": "a-1", "subject_id": "a", "phq8_score": 3,
             "age": 30, "gender": "female",
             "responses": [{"prompt_topic": "concerns", "text": "i am fine"}]},
            {"session_id": "a-2", "subject_id": "a", "phq8_score": 12,
             "age": 30, "gender": "female",
             "responses": [{"prompt_topic": "home life", "text": "not so good"}]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
        corpus = load_corpus(path)
        assert corpus.n_subjects == 1
        assert corpus.n_sessions == 2
        assert corpus.subjects[0].demographics.age == 30

        out = tmp_path / "copy.jsonl"
        save_corpus(corpus, out)
        assert load_corpus(out).n_sessions == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_corpus(path).n_subjects == 0

    def test_phq_out_of_range_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({
            "session_id": "x", "subject_id": "s", "phq8_score": 25, "responses": []}) + "\n")
        with pytest.raises(ValidationError, match="line 1"):
            load_corpus(path)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"session_id": "x"\n')
        with pytest.raises(CorpusFormatError, match="line 1"):
            load_corpus(path)

    def test_missing_subject_id(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"session_id": "x", "phq8_score": 3,
                                    "responses": []}) + "\n")
        with pytest.raises(ValidationError):
            load_corpus(path)

    def test_duplicate_session_id(self, tmp_path):
        rec = {"session_id": "x", "subject_id": "s", "phq8_score": 3, "responses": []}
        path = tmp_path / "dup.jsonl"
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_corpus(path)

    def test_conflicting_demographics_warn_first_wins(self, tmp_path):
        recs = [
            {"session_id": "x1", "subject_id": "s", "phq8_score": 3, "age": 30,
             "responses": []},
            {"session_id": "x2", "subject_id": "s", "phq8_score": 3, "age": 31,
             "responses": []},
        ]
        path = tmp_path / "c.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        with pytest.warns(UserWarning, match="conflicting demographics"):
            corpus = load_corpus(path)
        assert corpus.subjects[0].demographics.age == 30


class TestDemographics:
    def test_age_bucket_agreement_enforced(self):
        with pytest.raises(ValidationError):
            Demographics(age=30, age_bucket="18-25")
        Demographics(age=30, age_bucket="26-35")

    def test_bucket_edges(self):
        assert bucket_for_age(18) == "18-25"
        assert bucket_for_age(25) == "18-25"
        assert bucket_for_age(26) == "26-35"
        assert bucket_for_age(65) == "46-65"
        assert bucket_for_age(66) == "above 65"
        assert bucket_for_age(17) is None

    def test_bad_gender(self):
        with pytest.raises(ValidationError):
            Demographics(gender="other")


class TestPartition:
    def test_single_session_split(self):
        corpus = make_corpus([[3]] * 10)
        train, test = partition_speaker_disjoint(corpus, 0.3, seed=7)
        assert train.n_subjects == 7 and test.n_subjects == 3
        train_ids = {s.subject_id for s in train.subjects}
        test_ids = {s.subject_id for s in test.subjects}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {s.subject_id for s in corpus.subjects}

    def test_multi_session_forced_to_train(self):
        corpus = make_corpus([[3, 4]] * 4 + [[3]] * 6)
        train, test = partition_speaker_disjoint(corpus, 0.3, seed=1)
        multi_ids = {s.subject_id for s in corpus.subjects if len(s.sessions) > 1}
        assert multi_ids <= {s.subject_id for s in train.subjects}

    def test_deterministic(self):
        corpus = make_corpus([[3]] * 10)
        a = partition_speaker_disjoint(corpus, 0.3, seed=42)
        b = partition_speaker_disjoint(corpus, 0.3, seed=42)
        assert [s.subject_id for s in a[0].subjects] == [s.subject_id for s in b[0].subjects]
        assert [s.subject_id for s in a[1].subjects] == [s.subject_id for s in b[1].subjects]

    def test_empty_partition_rejected(self):
        corpus = make_corpus([[3]] * 4)
        with pytest.raises(ValidationError):
            partition_speaker_disjoint(corpus, 0.01, seed=0)

    @given(
        n_singles=st.integers(2, 12),
        n_multis=st.integers(0, 4),
        fraction=st.floats(0.1, 0.9),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=60, deadline=None)
    def test_disjoint_property(self, n_singles, n_multis, fraction, seed):
        corpus = make_corpus([[3]] * n_singles + [[3, 12]] * n_multis)
        try:
            train, test = partition_speaker_disjoint(corpus, fraction, seed)
        except ValidationError:
            return
        train_ids = {s.subject_id for s in train.subjects}
        test_ids = {s.subject_id for s in test.subjects}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {s.subject_id for s in corpus.subjects}


class TestStats:
    def test_sp_table_fixture(self, sp_table_corpus):
        stats = corpus_stats(sp_table_corpus)
        assert stats.total_sessions == 687
        assert stats.total_subjects == 161
        assert stats.subjects_mixed == 42
        assert stats.sessions_dep_plus == 208
        assert stats.sessions_dep_minus == 479
        assert stats.subjects_dep_plus == 39
        assert stats.subjects_dep_minus == 80

    def test_single_session_counts(self):
        corpus = make_corpus([[3]], texts=("one two three four five",) * 2)
        stats = corpus_stats(corpus)
        assert stats.sessions_dep_minus == 1
        assert stats.subjects_dep_minus == 1
        assert stats.mean_responses_per_session == 2
        assert stats.mean_words_per_session == 10

    def test_gp_shaped_mean_responses(self):
        # alternate 4- and 5-response sessions -> mean 4.5, as in the GP row
        subjects = []
        for i in range(10):
            n = 4 if i % 2 == 0 else 5
            subjects.append(make_subject(f"g{i}", [3], texts=("w",) * n))
        corpus = Corpus(name="gp-shape", subjects=tuple(subjects))
        assert corpus_stats(corpus).mean_responses_per_session == pytest.approx(4.5)

    def test_consistency_counts_partition_subjects(self):
        corpus = make_corpus([[3], [12, 3], [15, 15], [0, 24, 12]])
        stats = corpus_stats(corpus)
        n_inconsistent = sum(
            label_subject_consistency(s) is ConsistencyLabel.INCONSISTENT
            for s in corpus.subjects
        )
        assert stats.subjects_mixed == n_inconsistent
        assert stats.total_subjects == corpus.n_subjects


class TestSessionText:
    def test_concatenate_has_separators(self):
        session = make_session("s1", "u", 3, texts=("a b", "c", "d e f"))
        units = session_text(session, "concatenate_responses")
        assert len(units) == 1
        assert units[0].count("<rsep>") == 2

    def test_per_response(self):
        session = make_session("s1", "u", 3, texts=("a", "b", "c"))
        assert session_text(session, "per_response") == ["a", "b", "c"]

    def test_single_response_unchanged(self):
        session = make_session("s1", "u", 3, texts=("just one response",))
        assert session_text(session, "concatenate_responses") == ["just one response"]

    def test_all_empty_rejected(self):
        session = make_session("s1", "u", 3, texts=("", "  "))
        with pytest.raises(DegenerateInputError):
            session_text(session)


class TestCorpusInvariants:
    def test_duplicate_subject_rejected(self):
        subj = make_subject("dup", [3])
        with pytest.raises(ValidationError):
            Corpus(name="x", subjects=(subj, subj))

    def test_session_subject_mismatch_rejected(self):
        session = make_session("s1", "other", 3)
        with pytest.raises(ValidationError):
            make_subject("u", []).__class__(
                subject_id="u", demographics=Demographics(), sessions=(session,)
            )
