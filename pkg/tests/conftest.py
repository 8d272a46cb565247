from __future__ import annotations

import pytest

from portalm.corpus import Corpus, Demographics, Response, Session, Subject


def make_session(session_id, subject_id, phq8_score, texts=("hello world",),
                 timestamp=None, topics=None):
    responses = tuple(
        Response(
            response_id=f"{session_id}-r{j}",
            prompt_topic=(topics[j] if topics else "concerns"),
            text=t,
        )
        for j, t in enumerate(texts)
    )
    return Session(
        session_id=session_id,
        subject_id=subject_id,
        responses=responses,
        phq8_score=phq8_score,
        timestamp=timestamp,
    )


def make_subject(subject_id, scores, demographics=None, texts=("hello world",)):
    sessions = tuple(
        make_session(f"{subject_id}-t{k}", subject_id, score, texts=texts)
        for k, score in enumerate(scores)
    )
    return Subject(
        subject_id=subject_id,
        demographics=demographics or Demographics(),
        sessions=sessions,
    )


def make_corpus(subject_scores, name="fixture", **kwargs):
    subjects = tuple(
        make_subject(f"subj{i:03d}", scores, **kwargs)
        for i, scores in enumerate(subject_scores)
    )
    return Corpus(name=name, subjects=subjects)


@pytest.fixture
def sp_table_corpus():
    """Corpus matching the senior-set row of the paper-style stats table:
    161 subjects (39 all-dep+, 80 all-dep-, 42 mixed), 208 dep+ sessions and
    479 dep- sessions in total."""
    subjects = []
    i = 0
    for _ in range(39):  # consistent dep+: one session each -> 39 dep+ sessions
        subjects.append(make_subject(f"spfix{i:03d}", [15]))
        i += 1
    for _ in range(80):  # consistent dep-: one session each -> 80 dep- sessions
        subjects.append(make_subject(f"spfix{i:03d}", [4]))
        i += 1
    # mixed subjects carry the remaining 169 dep+ and 399 dep- sessions
    plus_left, minus_left = 208 - 39, 479 - 80
    for k in range(42):
        n_plus = plus_left // (42 - k)
        n_minus = minus_left // (42 - k)
        plus_left -= n_plus
        minus_left -= n_minus
        scores = [12] * n_plus + [4] * n_minus
        subjects.append(make_subject(f"spfix{i:03d}", scores))
        i += 1
    assert plus_left == 0 and minus_left == 0
    return Corpus(name="sp-fixture", subjects=tuple(subjects))
