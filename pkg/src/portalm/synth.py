"""Synthetic corpus generator with plantable lexical class signal,
demographic covariate shift, and longitudinal label dynamics.

Text is drawn from per-class unigram mixtures over a shared pseudo-word
vocabulary: class-marker tokens are injected at a configurable rate, domain
shift swaps a fraction of base words for a disjoint alternate set, and two
noise knobs (inconsistent-subject noise, senior-degradation ramp) corrupt
the marker class. Everything is a pure function of spec + seed.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import Corpus, Demographics, Response, Session, Subject, binarize_phq
from .errors import ValidationError

TOPICS = ("concerns", "home life", "work", "sleep", "mood", "energy")

_BASE_WORDS = 400
_MARKERS_PER_CLASS = 12
_ALT_WORDS = 200


def _word_pool(n: int) -> list[str]:
    """Deterministic pool of unique pseudo-words (no RNG involved)."""
    syllables = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
    pool = []
    for a in syllables:
        for b in syllables:
            pool.append(a + b)
            if len(pool) >= n:
                return pool
    raise ValidationError(f"word pool exhausted at {len(pool)} < {n}")


def base_words() -> list[str]:
    return _word_pool(_BASE_WORDS)


def marker_tokens() -> tuple[list[str], list[str]]:
    """(dep+ markers, dep- markers); disjoint from the base vocabulary."""
    start = _BASE_WORDS
    pool = _word_pool(start + 2 * _MARKERS_PER_CLASS)
    return pool[start : start + _MARKERS_PER_CLASS], pool[start + _MARKERS_PER_CLASS :]


def alt_words(alt_set: int = 0) -> list[str]:
    start = _BASE_WORDS + 2 * _MARKERS_PER_CLASS + alt_set * _ALT_WORDS
    return _word_pool(start + _ALT_WORDS)[start:]


@dataclass(frozen=True)
class Dist:
    """Small serializable integer distribution (fixed/uniform_int/choice/normal_int/mixture)."""

    kind: str
    value: int | None = None
    lo: int | None = None
    hi: int | None = None
    values: tuple[int, ...] = ()
    probs: tuple[float, ...] = ()
    components: tuple[tuple[float, float, float], ...] = ()  # (mean, sd, weight)

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value is None:
                raise ValidationError("fixed dist needs value")
        elif self.kind == "uniform_int":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise ValidationError("uniform_int dist needs lo <= hi")
        elif self.kind == "choice":
            if not self.values or len(self.values) != len(self.probs):
                raise ValidationError("choice dist needs matching values/probs")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise ValidationError("choice probs must sum to 1")
        elif self.kind == "normal_int":
            if None in (self.value, self.lo, self.hi):
                raise ValidationError("normal_int dist needs value (mean), lo, hi")
        elif self.kind == "mixture":
            if not self.components or None in (self.lo, self.hi):
                raise ValidationError("mixture dist needs components, lo, hi")
            if abs(sum(w for _, _, w in self.components) - 1.0) > 1e-9:
                raise ValidationError("mixture weights must sum to 1")
        else:
            raise ValidationError(f"unknown dist kind {self.kind!r}")

    # normal_int reuses `value` for the mean and `probs[0]` for the sd
    @classmethod
    def fixed(cls, value: int) -> "Dist":
        return cls(kind="fixed", value=value)

    @classmethod
    def uniform_int(cls, lo: int, hi: int) -> "Dist":
        return cls(kind="uniform_int", lo=lo, hi=hi)

    @classmethod
    def choice(cls, values: Sequence[int], probs: Sequence[float]) -> "Dist":
        return cls(kind="choice", values=tuple(values), probs=tuple(probs))

    @classmethod
    def normal_int(cls, mean: float, sd: float, lo: int, hi: int) -> "Dist":
        return cls(kind="normal_int", value=int(round(mean)), lo=lo, hi=hi,
                   probs=(float(sd),), components=((float(mean), float(sd), 1.0),))

    @classmethod
    def mixture(
        cls, components: Sequence[tuple[float, float, float]], lo: int, hi: int
    ) -> "Dist":
        return cls(kind="mixture", components=tuple(components), lo=lo, hi=hi)

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.value)
        if self.kind == "uniform_int":
            return int(rng.integers(self.lo, self.hi + 1))
        if self.kind == "choice":
            return int(rng.choice(np.asarray(self.values), p=np.asarray(self.probs)))
        # normal_int and mixture share the gaussian-component path
        comps = self.components
        if len(comps) == 1:
            mean, sd, _ = comps[0]
        else:
            weights = np.asarray([w for _, _, w in comps])
            mean, sd, _ = comps[int(rng.choice(len(comps), p=weights))]
        x = int(round(rng.normal(mean, sd)))
        return int(min(max(x, self.lo), self.hi))

    def max_value(self) -> int:
        if self.kind == "fixed":
            return int(self.value)
        if self.kind == "choice":
            return max(self.values)
        return int(self.hi)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.value is not None:
            out["value"] = self.value
        if self.lo is not None:
            out["lo"] = self.lo
        if self.hi is not None:
            out["hi"] = self.hi
        if self.values:
            out["values"] = list(self.values)
        if self.probs:
            out["probs"] = list(self.probs)
        if self.components:
            out["components"] = [list(c) for c in self.components]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Dist":
        return cls(
            kind=d["kind"],
            value=d.get("value"),
            lo=d.get("lo"),
            hi=d.get("hi"),
            values=tuple(d.get("values", ())),
            probs=tuple(d.get("probs", ())),
            components=tuple(tuple(c) for c in d.get("components", ())),
        )


@dataclass(frozen=True)
class SynthSpec:
    name: str = "synth"
    n_subjects: int = 100
    sessions_per_subject: Dist = field(default_factory=lambda: Dist.fixed(1))
    responses_per_session: Dist = field(default_factory=lambda: Dist.choice((4, 5), (0.5, 0.5)))
    words_per_response: Dist = field(default_factory=lambda: Dist.normal_int(30, 6, 8, 80))
    dep_prevalence: float = 0.27
    signal_strength: float = 0.1
    noise_for_inconsistent: float = 0.0
    inconsistency_rate: float = 0.0
    age: Dist = field(default_factory=lambda: Dist.normal_int(30, 8, 18, 65))
    gender_probs: tuple[tuple[str, float], ...] = (("female", 0.59), ("male", 0.41))
    ethnicity_probs: tuple[tuple[str, float], ...] = ()
    domain_shift: float = 0.0
    alt_set: int = 0
    senior_degradation: float = 0.0  # marker flip rate at the top of the age ramp
    senior_degradation_onset: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 1:
            raise ValidationError("n_subjects must be >= 1")
        if not 0.0 < self.dep_prevalence < 1.0:
            raise ValidationError(f"dep_prevalence {self.dep_prevalence} not in (0, 1)")
        if not 0.0 <= self.inconsistency_rate < 1.0:
            raise ValidationError(f"inconsistency_rate {self.inconsistency_rate} not in [0, 1)")
        if self.inconsistency_rate > 0 and self.sessions_per_subject.max_value() < 2:
            raise ValidationError(
                "inconsistency_rate > 0 requires sessions_per_subject able to reach 2"
            )
        for knob in ("signal_strength", "noise_for_inconsistent", "senior_degradation"):
            v = getattr(self, knob)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{knob} {v} not in [0, 1]")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValidationError(f"domain_shift {self.domain_shift} not in [0, 1]")
        for label, p in self.gender_probs:
            if label not in ("female", "male", "unspecified") or p < 0:
                raise ValidationError(f"bad gender entry ({label!r}, {p})")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_subjects": self.n_subjects,
            "sessions_per_subject": self.sessions_per_subject.to_dict(),
            "responses_per_session": self.responses_per_session.to_dict(),
            "words_per_response": self.words_per_response.to_dict(),
            "dep_prevalence": self.dep_prevalence,
            "signal_strength": self.signal_strength,
            "noise_for_inconsistent": self.noise_for_inconsistent,
            "inconsistency_rate": self.inconsistency_rate,
            "age": self.age.to_dict(),
            "gender_probs": [list(g) for g in self.gender_probs],
            "ethnicity_probs": [list(e) for e in self.ethnicity_probs],
            "domain_shift": self.domain_shift,
            "alt_set": self.alt_set,
            "senior_degradation": self.senior_degradation,
            "senior_degradation_onset": self.senior_degradation_onset,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kwargs = dict(d)
        for dist_field in ("sessions_per_subject", "responses_per_session",
                           "words_per_response", "age"):
            if dist_field in kwargs:
                kwargs[dist_field] = Dist.from_dict(kwargs[dist_field])
        for cat_field in ("gender_probs", "ethnicity_probs"):
            if cat_field in kwargs:
                kwargs[cat_field] = tuple((str(k), float(v)) for k, v in kwargs[cat_field])
        unknown = set(kwargs) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**kwargs)


def _sample_categorical(
    rng: np.random.Generator, probs: tuple[tuple[str, float], ...]
) -> str | None:
    if not probs:
        return None
    labels = [k for k, _ in probs]
    weights = np.asarray([v for _, v in probs], dtype=float)
    weights = weights / weights.sum()
    return labels[int(rng.choice(len(labels), p=weights))]


def _session_classes(
    rng: np.random.Generator, n_sessions: int, prevalence: float, inconsistent: bool
) -> list[bool]:
    if not inconsistent:
        dep = bool(rng.random() < prevalence)
        return [dep] * n_sessions
    while True:
        classes = [bool(rng.random() < prevalence) for _ in range(n_sessions)]
        if any(classes) and not all(classes):
            return classes


def _phq_score(rng: np.random.Generator, dep: bool) -> int:
    if dep:
        return int(min(max(round(rng.normal(13.0, 3.0)), 10), 24))
    return int(min(max(round(rng.normal(4.0, 2.5)), 0), 9))


def _flip(rng: np.random.Generator, dep: bool, p: float) -> bool:
    if p > 0 and rng.random() < p:
        return not dep
    return dep


def _response_words(
    rng: np.random.Generator,
    n_words: int,
    dep: bool,
    spec: SynthSpec,
    age: int,
    inconsistent: bool,
    vocab: dict,
) -> list[str]:
    ramp_top = 90
    age_flip = 0.0
    if spec.senior_degradation > 0 and age > spec.senior_degradation_onset:
        frac = (age - spec.senior_degradation_onset) / (ramp_top - spec.senior_degradation_onset)
        age_flip = spec.senior_degradation * min(frac, 1.0)
    words = []
    for _ in range(n_words):
        if rng.random() < spec.signal_strength:
            cls = dep
            if inconsistent:
                cls = _flip(rng, cls, spec.noise_for_inconsistent)
            cls = _flip(rng, cls, age_flip)
            pool = vocab["markers_pos"] if cls else vocab["markers_neg"]
        elif spec.domain_shift > 0 and rng.random() < spec.domain_shift:
            pool = vocab["alt"]
        else:
            pool = vocab["base"]
        words.append(pool[int(rng.integers(0, len(pool)))])
    return words


def generate_corpus(spec: SynthSpec) -> Corpus:
    """Generate a corpus of labeled subjects per the spec; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    markers_pos, markers_neg = marker_tokens()
    vocab = {
        "base": base_words(),
        "alt": alt_words(spec.alt_set),
        "markers_pos": markers_pos,
        "markers_neg": markers_neg,
    }
    start_date = datetime.date(2024, 1, 1)
    subjects = []
    for i in range(spec.n_subjects):
        subject_id = f"{spec.name}-s{i:04d}"
        n_sessions = spec.sessions_per_subject.sample(rng)
        inconsistent = bool(
            spec.inconsistency_rate > 0 and rng.random() < spec.inconsistency_rate
        )
        if inconsistent:
            n_sessions = max(n_sessions, 2)
        age = spec.age.sample(rng)
        gender = _sample_categorical(rng, spec.gender_probs) or "unspecified"
        ethnicity = _sample_categorical(rng, spec.ethnicity_probs)
        classes = _session_classes(rng, n_sessions, spec.dep_prevalence, inconsistent)
        sessions = []
        for k, dep in enumerate(classes):
            n_responses = spec.responses_per_session.sample(rng)
            responses = []
            for j in range(n_responses):
                n_words = spec.words_per_response.sample(rng)
                words = _response_words(rng, n_words, dep, spec, age, inconsistent, vocab)
                responses.append(
                    Response(
                        response_id=f"{subject_id}-t{k}-r{j}",
                        prompt_topic=TOPICS[j % len(TOPICS)],
                        text=" ".join(words),
                    )
                )
            sessions.append(
                Session(
                    session_id=f"{subject_id}-t{k}",
                    subject_id=subject_id,
                    responses=tuple(responses),
                    phq8_score=_phq_score(rng, dep),
                    timestamp=(start_date + datetime.timedelta(days=7 * k)).isoformat(),
                )
            )
        subjects.append(
            Subject(
                subject_id=subject_id,
                demographics=Demographics(age=age, gender=gender, ethnicity=ethnicity),
                sessions=tuple(sessions),
            )
        )
    return Corpus(name=spec.name, subjects=tuple(subjects))


def _age_overlap(spec_a: SynthSpec, spec_b: SynthSpec, n_probe: int = 20000) -> float:
    """Monte Carlo overlap coefficient of the two integer age distributions."""
    rng = np.random.default_rng(123456789)
    ages_a = np.asarray([spec_a.age.sample(rng) for _ in range(n_probe)])
    ages_b = np.asarray([spec_b.age.sample(rng) for _ in range(n_probe)])
    lo = int(min(ages_a.min(), ages_b.min()))
    hi = int(max(ages_a.max(), ages_b.max()))
    bins = np.arange(lo, hi + 2)
    pa, _ = np.histogram(ages_a, bins=bins)
    pb, _ = np.histogram(ages_b, bins=bins)
    return float(np.minimum(pa / n_probe, pb / n_probe).sum())


def gp_sp_pair(spec_gp: SynthSpec, spec_sp: SynthSpec) -> tuple[Corpus, Corpus]:
    """Generate an age-mismatched corpus pair sharing the class-signal vocabulary.

    Rejects pairs whose age distributions overlap too much to count as
    demographically mismatched (overlap coefficient must stay below 0.2).
    """
    overlap = _age_overlap(spec_gp, spec_sp)
    if overlap >= 0.2:
        raise ValidationError(
            f"age distributions overlap too much for a mismatched pair "
            f"(overlap coefficient {overlap:.3f} >= 0.2)"
        )
    return generate_corpus(spec_gp), generate_corpus(spec_sp)


def default_gp_spec(**overrides) -> SynthSpec:
    """Young, large, mostly single-session corpus (~4.5 responses/session)."""
    spec = SynthSpec(
        name="gp",
        n_subjects=300,
        sessions_per_subject=Dist.choice((1, 2), (0.85, 0.15)),
        responses_per_session=Dist.choice((4, 5), (0.5, 0.5)),
        words_per_response=Dist.normal_int(178, 30, 40, 400),
        dep_prevalence=0.267,
        signal_strength=0.10,
        inconsistency_rate=0.05,
        noise_for_inconsistent=0.6,
        age=Dist.normal_int(30, 8, 18, 65),
        gender_probs=(("female", 0.59), ("male", 0.41)),
        ethnicity_probs=(
            ("caucasian", 0.665), ("hispanic", 0.080), ("african-american", 0.079),
            ("mixed", 0.055), ("east asian", 0.041), ("other", 0.029),
            ("south asian", 0.019), ("caribbean", 0.012), ("decline", 0.020),
        ),
        domain_shift=0.0,
        seed=1,
    )
    return replace(spec, **overrides) if overrides else spec


def default_sp_spec(**overrides) -> SynthSpec:
    """Senior, small, longitudinal corpus (~6.1 responses/session, test-only)."""
    spec = SynthSpec(
        name="sp",
        n_subjects=80,
        sessions_per_subject=Dist.choice((3, 4, 5, 6), (0.2, 0.3, 0.3, 0.2)),
        responses_per_session=Dist.choice((5, 6, 7), (0.2, 0.5, 0.3)),
        words_per_response=Dist.normal_int(74, 15, 20, 200),
        dep_prevalence=0.30,
        signal_strength=0.10,
        inconsistency_rate=0.26,
        noise_for_inconsistent=0.6,
        age=Dist.normal_int(74, 6, 55, 95),
        gender_probs=(("female", 0.62), ("male", 0.38)),
        ethnicity_probs=(),
        domain_shift=0.25,
        senior_degradation=0.0,
        seed=2,
    )
    return replace(spec, **overrides) if overrides else spec
