"""Data model for longitudinal, demographically annotated, PHQ-8-labeled
transcript corpora: loading, class labeling, consistency labeling,
speaker-disjoint partitioning, and summary statistics.

Corpus objects are immutable after construction; every operation here is a
pure function of its inputs, so corpora can be shared across threads.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterator

from .errors import CorpusFormatError, DegenerateInputError, ValidationError

PHQ_MIN = 0
PHQ_MAX = 24
PHQ_CUTOFF = 10  # scores at or above this are dep+

AGE_BUCKETS = ("18-25", "26-35", "36-45", "46-65", "above 65")
GENDERS = ("female", "male", "unspecified")

RSEP_TOKEN = "<rsep>"


class DepressionClass(IntEnum):
    """Binary depression class; ordering DEP_MINUS < DEP_PLUS is meaningful."""

    DEP_MINUS = 0
    DEP_PLUS = 1

    @property
    def label(self) -> str:
        return "dep+" if self is DepressionClass.DEP_PLUS else "dep-"


class ConsistencyLabel(Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"


def binarize_phq(score: int) -> DepressionClass:
    """Map a PHQ-8 score to its binary class (cutoff at 10, inclusive)."""
    if not isinstance(score, int) or isinstance(score, bool):
        raise ValidationError(f"phq8_score must be an integer, got {score!r}")
    if not PHQ_MIN <= score <= PHQ_MAX:
        raise ValidationError(f"phq8_score {score} outside [{PHQ_MIN}, {PHQ_MAX}]")
    return DepressionClass.DEP_PLUS if score >= PHQ_CUTOFF else DepressionClass.DEP_MINUS


def bucket_for_age(age: int) -> str | None:
    """Age bucket label for an integer age; None when below the youngest bucket."""
    if age < 18:
        return None
    if age <= 25:
        return "18-25"
    if age <= 35:
        return "26-35"
    if age <= 45:
        return "36-45"
    if age <= 65:
        return "46-65"
    return "above 65"


@dataclass(frozen=True)
class Response:
    response_id: str
    prompt_topic: str
    text: str

    @property
    def word_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class Session:
    session_id: str
    subject_id: str
    responses: tuple[Response, ...]
    phq8_score: int
    timestamp: str | None = None  # ISO-8601 date

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise ValidationError(f"session {self.session_id!r}: missing subject_id")
        binarize_phq(self.phq8_score)  # range check

    @property
    def depression_class(self) -> DepressionClass:
        return binarize_phq(self.phq8_score)

    @property
    def word_count(self) -> int:
        return sum(r.word_count for r in self.responses)


@dataclass(frozen=True)
class Demographics:
    age: int | None = None
    age_bucket: str | None = None
    gender: str = "unspecified"
    ethnicity: str | None = None

    def __post_init__(self) -> None:
        if self.gender not in GENDERS:
            raise ValidationError(f"gender {self.gender!r} not one of {GENDERS}")
        if self.age_bucket is not None and self.age_bucket not in AGE_BUCKETS:
            raise ValidationError(f"age_bucket {self.age_bucket!r} not one of {AGE_BUCKETS}")
        if self.age is not None and self.age_bucket is not None:
            if bucket_for_age(self.age) != self.age_bucket:
                raise ValidationError(
                    f"age {self.age} falls outside declared bucket {self.age_bucket!r}"
                )

    def resolved_age_bucket(self) -> str | None:
        """Declared bucket, else the bucket derived from numeric age."""
        if self.age_bucket is not None:
            return self.age_bucket
        if self.age is not None:
            return bucket_for_age(self.age)
        return None


@dataclass(frozen=True)
class Subject:
    subject_id: str
    demographics: Demographics
    sessions: tuple[Session, ...]

    def __post_init__(self) -> None:
        for s in self.sessions:
            if s.subject_id != self.subject_id:
                raise ValidationError(
                    f"session {s.session_id!r} references subject {s.subject_id!r}, "
                    f"not {self.subject_id!r}"
                )
        stamps = [s.timestamp for s in self.sessions if s.timestamp is not None]
        if len(stamps) == len(self.sessions) and stamps != sorted(stamps):
            object.__setattr__(
                self, "sessions", tuple(sorted(self.sessions, key=lambda s: s.timestamp))
            )


def label_subject_consistency(subject: Subject) -> ConsistencyLabel:
    """Inconsistent iff the subject's sessions contain both classes.

    Single-session subjects are consistent by definition.
    """
    if not subject.sessions:
        raise ValidationError(f"subject {subject.subject_id!r} has no sessions")
    classes = {s.depression_class for s in subject.sessions}
    if len(classes) == 2:
        return ConsistencyLabel.INCONSISTENT
    return ConsistencyLabel.CONSISTENT


@dataclass(frozen=True)
class Corpus:
    name: str
    subjects: tuple[Subject, ...]
    split_tag: str = "unsplit"  # train | test | unsplit

    def __post_init__(self) -> None:
        if self.split_tag not in ("train", "test", "unsplit"):
            raise ValidationError(f"split_tag {self.split_tag!r} invalid")
        seen_subj: set[str] = set()
        seen_sess: set[str] = set()
        for subj in self.subjects:
            if subj.subject_id in seen_subj:
                raise ValidationError(f"duplicate subject_id {subj.subject_id!r}")
            seen_subj.add(subj.subject_id)
            for s in subj.sessions:
                if s.session_id in seen_sess:
                    raise ValidationError(f"duplicate session_id {s.session_id!r}")
                seen_sess.add(s.session_id)

    def sessions(self) -> Iterator[Session]:
        for subj in self.subjects:
            yield from subj.sessions

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_sessions(self) -> int:
        return sum(len(subj.sessions) for subj in self.subjects)

    def subject_of(self, session_id: str) -> Subject:
        for subj in self.subjects:
            for s in subj.sessions:
                if s.session_id == session_id:
                    return subj
        raise KeyError(session_id)


def _parse_session_record(rec: dict, lineno: int) -> tuple[Session, Demographics]:
    try:
        session_id = rec["session_id"]
        subject_id = rec.get("subject_id")
        if not subject_id:
            raise ValidationError("missing subject_id")
        phq8_score = rec["phq8_score"]
        raw_responses = rec.get("responses", [])
        responses = tuple(
            Response(
                response_id=f"{session_id}-r{j}",
                prompt_topic=r.get("prompt_topic", ""),
                text=r.get("text", ""),
            )
            for j, r in enumerate(raw_responses)
        )
        session = Session(
            session_id=session_id,
            subject_id=subject_id,
            responses=responses,
            phq8_score=phq8_score,
            timestamp=rec.get("timestamp"),
        )
        demo = Demographics(
            age=rec.get("age"),
            age_bucket=rec.get("age_bucket"),
            gender=rec.get("gender", "unspecified"),
            ethnicity=rec.get("ethnicity"),
        )
        return session, demo
    except KeyError as e:
        raise ValidationError(f"line {lineno}: missing field {e.args[0]!r}") from e
    except ValidationError as e:
        raise ValidationError(f"line {lineno}: {e}") from e


def load_corpus(path, format: str = "jsonl", name: str | None = None) -> Corpus:
    """Load a corpus from a JSON-lines file, one session record per line.

    Demographics are duplicated per session in the file; the first occurrence
    per subject wins and later conflicting values trigger a warning.
    """
    if format != "jsonl":
        raise ValidationError(f"unsupported corpus format {format!r}")
    by_subject: dict[str, list[Session]] = {}
    demo_by_subject: dict[str, Demographics] = {}
    seen_sessions: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({e.msg})") from e
            session, demo = _parse_session_record(rec, lineno)
            if session.session_id in seen_sessions:
                raise ValidationError(
                    f"line {lineno}: duplicate session_id {session.session_id!r}"
                )
            seen_sessions.add(session.session_id)
            by_subject.setdefault(session.subject_id, []).append(session)
            if session.subject_id not in demo_by_subject:
                demo_by_subject[session.subject_id] = demo
            elif demo_by_subject[session.subject_id] != demo:
                warnings.warn(
                    f"line {lineno}: conflicting demographics for subject "
                    f"{session.subject_id!r}; keeping first occurrence",
                    stacklevel=2,
                )
    subjects = tuple(
        Subject(
            subject_id=sid,
            demographics=demo_by_subject[sid],
            sessions=tuple(by_subject[sid]),
        )
        for sid in sorted(by_subject)
    )
    corpus_name = name if name is not None else str(path)
    return Corpus(name=corpus_name, subjects=subjects)


def session_to_record(session: Session, demographics: Demographics) -> dict:
    """One JSONL record in the on-disk session schema."""
    rec: dict = {
        "session_id": session.session_id,
        "subject_id": session.subject_id,
        "phq8_score": session.phq8_score,
    }
    if session.timestamp is not None:
        rec["timestamp"] = session.timestamp
    if demographics.age is not None:
        rec["age"] = demographics.age
    if demographics.age_bucket is not None:
        rec["age_bucket"] = demographics.age_bucket
    rec["gender"] = demographics.gender
    if demographics.ethnicity is not None:
        rec["ethnicity"] = demographics.ethnicity
    rec["responses"] = [
        {"prompt_topic": r.prompt_topic, "text": r.text} for r in session.responses
    ]
    return rec


def save_corpus(corpus: Corpus, path) -> None:
    """Write the corpus in the JSONL session schema, deterministically ordered."""
    with open(path, "w", encoding="utf-8") as f:
        for subj in corpus.subjects:
            for session in subj.sessions:
                rec = session_to_record(session, subj.demographics)
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def partition_speaker_disjoint(
    corpus: Corpus, test_fraction: float, seed: int
) -> tuple[Corpus, Corpus]:
    """Split a corpus into speaker-disjoint train/test partitions.

    Subjects with more than one session are always placed in train; the test
    partition is drawn from single-session subjects only. Deterministic given
    the seed.
    """
    if corpus.n_subjects < 2:
        raise ValidationError("partition requires at least 2 subjects")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction {test_fraction} not in (0, 1)")
    singles = [s for s in corpus.subjects if len(s.sessions) == 1]
    multis = [s for s in corpus.subjects if len(s.sessions) > 1]
    n_test = round(test_fraction * corpus.n_subjects)
    if n_test == 0 or n_test > len(singles) or n_test == corpus.n_subjects:
        raise ValidationError(
            f"test_fraction {test_fraction} leaves an empty or infeasible partition "
            f"({n_test} test subjects requested, {len(singles)} single-session available)"
        )
    rng = random.Random(seed)
    shuffled = sorted(singles, key=lambda s: s.subject_id)
    rng.shuffle(shuffled)
    test_subjects = sorted(shuffled[:n_test], key=lambda s: s.subject_id)
    train_subjects = sorted(
        shuffled[n_test:] + multis, key=lambda s: s.subject_id
    )
    train = Corpus(name=f"{corpus.name}-train", subjects=tuple(train_subjects), split_tag="train")
    test = Corpus(name=f"{corpus.name}-test", subjects=tuple(test_subjects), split_tag="test")
    return train, test


@dataclass(frozen=True)
class StatsTable:
    """Corpus summary in the shape of the data-characteristics table:
    session counts per class, subject counts per consistency group,
    and per-session length means."""

    sessions_dep_plus: int
    sessions_dep_minus: int
    subjects_dep_plus: int
    subjects_dep_minus: int
    subjects_mixed: int
    mean_words_per_session: float
    mean_responses_per_session: float

    @property
    def total_sessions(self) -> int:
        return self.sessions_dep_plus + self.sessions_dep_minus

    @property
    def total_subjects(self) -> int:
        return self.subjects_dep_plus + self.subjects_dep_minus + self.subjects_mixed

    def as_dict(self) -> dict:
        return {
            "sessions": {
                "dep+": self.sessions_dep_plus,
                "dep-": self.sessions_dep_minus,
                "total": self.total_sessions,
            },
            "subjects": {
                "dep+": self.subjects_dep_plus,
                "dep-": self.subjects_dep_minus,
                "dep+/-": self.subjects_mixed,
                "total": self.total_subjects,
            },
            "mean_words_per_session": self.mean_words_per_session,
            "mean_responses_per_session": self.mean_responses_per_session,
        }


def corpus_stats(corpus: Corpus) -> StatsTable:
    """Count sessions per class and subjects per consistency group.

    Subject rows split into all-dep+, all-dep-, and mixed (dep+/-); session
    rows partition every session by its own class, so the session totals and
    subject totals both sum to the corpus totals.
    """
    sess_plus = sess_minus = 0
    subj_plus = subj_minus = subj_mixed = 0
    total_words = 0
    total_responses = 0
    for subj in corpus.subjects:
        classes = set()
        for s in subj.sessions:
            cls = s.depression_class
            classes.add(cls)
            if cls is DepressionClass.DEP_PLUS:
                sess_plus += 1
            else:
                sess_minus += 1
            total_words += s.word_count
            total_responses += len(s.responses)
        if len(classes) == 2:
            subj_mixed += 1
        elif DepressionClass.DEP_PLUS in classes:
            subj_plus += 1
        elif DepressionClass.DEP_MINUS in classes:
            subj_minus += 1
    n_sessions = sess_plus + sess_minus
    return StatsTable(
        sessions_dep_plus=sess_plus,
        sessions_dep_minus=sess_minus,
        subjects_dep_plus=subj_plus,
        subjects_dep_minus=subj_minus,
        subjects_mixed=subj_mixed,
        mean_words_per_session=total_words / n_sessions if n_sessions else 0.0,
        mean_responses_per_session=total_responses / n_sessions if n_sessions else 0.0,
    )


def session_text(session: Session, mode: str = "concatenate_responses") -> list[str]:
    """Turn a session into text units for the model.

    concatenate_responses joins all responses into one unit separated by the
    reserved <rsep> symbol; per_response yields one unit per response.
    """
    if not session.responses:
        raise DegenerateInputError(f"session {session.session_id!r} has no responses")
    texts = [r.text for r in session.responses]
    if all(not t.strip() for t in texts):
        raise DegenerateInputError(f"session {session.session_id!r}: all responses empty")
    if mode == "concatenate_responses":
        return [f" {RSEP_TOKEN} ".join(texts)]
    if mode == "per_response":
        return texts
    raise ValidationError(f"unknown session_text mode {mode!r}")


def relabel_split(corpus: Corpus, split_tag: str) -> Corpus:
    return replace(corpus, split_tag=split_tag)
