"""Session-level classification metrics and stratified portability reports.

AUC follows the Mann-Whitney convention (ties credited 0.5) via average
ranks, which matches the brute-force pairwise definition exactly. EER is
taken over observed-score thresholds without ROC interpolation. Undefined
metrics are flagged values in reports, never silent NaNs.

Everything here is a pure function of its record list.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .corpus import (
    AGE_BUCKETS,
    ConsistencyLabel,
    Corpus,
    Demographics,
    DepressionClass,
    binarize_phq,
    label_subject_consistency,
)
from .errors import MetricUndefinedError, ValidationError

SUBGROUP_KEYS = ("age_bucket", "gender", "ethnicity", "consistency")


@dataclass(frozen=True)
class PredictionRecord:
    """One session's model output joined with its ground-truth metadata."""

    session_id: str
    subject_id: str
    score: float
    true_phq: int
    true_class: DepressionClass
    phq_estimate: float | None = None
    demographics: Demographics | None = None
    consistency: ConsistencyLabel | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValidationError(f"session {self.session_id!r}: non-finite score")
        if self.true_class is not binarize_phq(self.true_phq):
            raise ValidationError(
                f"session {self.session_id!r}: true_class inconsistent with true_phq"
            )


def _scores_and_labels(records: Sequence[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray([r.score for r in records], dtype=float)
    is_pos = np.asarray(
        [r.true_class is DepressionClass.DEP_PLUS for r in records], dtype=bool
    )
    return scores, is_pos


def _check_two_classes(is_pos: np.ndarray) -> None:
    n_pos = int(is_pos.sum())
    n_neg = int((~is_pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUC undefined: {n_pos} positive and {n_neg} negative records"
        )


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied groups assigned their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=float)
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and scores[order[j]] == scores[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + 1 + j) / 2.0
        i = j
    return ranks


def roc_auc(records: Sequence[PredictionRecord]) -> float:
    """Rank-based ROC AUC; equals the pairwise Mann-Whitney statistic exactly."""
    scores, is_pos = _scores_and_labels(records)
    _check_two_classes(is_pos)
    n_pos = int(is_pos.sum())
    n_neg = len(records) - n_pos
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[is_pos].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


def roc_curve(records: Sequence[PredictionRecord]) -> list[RocPoint]:
    """ROC points at every distinct score (rule: positive iff score >= threshold),
    with a sentinel above the maximum so the curve starts at (0, 0)."""
    scores, is_pos = _scores_and_labels(records)
    _check_two_classes(is_pos)
    n_pos = int(is_pos.sum())
    n_neg = len(records) - n_pos
    order = np.argsort(-scores, kind="stable")
    points = [RocPoint(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    n = len(records)
    while i < n:
        j = i
        thr = scores[order[i]]
        while j < n and scores[order[j]] == thr:
            if is_pos[order[j]]:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append(RocPoint(fp / n_neg, tp / n_pos, float(thr)))
        i = j
    return points


def roc_curve_area(points: Sequence[RocPoint]) -> float:
    """Trapezoidal area under a ROC curve; matches roc_auc to ~1e-12."""
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return area


class EerOperatingPoint(NamedTuple):
    threshold: float
    specificity: float
    sensitivity: float


def eer_operating_point(records: Sequence[PredictionRecord]) -> EerOperatingPoint:
    """Operating point nearest equal error rate.

    Minimizes |FPR - FNR| over observed-score thresholds (positive iff
    score >= threshold); ties break toward higher sensitivity. On finite data
    specificity and sensitivity deviate only due to score sparsity.
    """
    scores, is_pos = _scores_and_labels(records)
    _check_two_classes(is_pos)
    n_pos = int(is_pos.sum())
    n_neg = len(records) - n_pos
    best: tuple[float, float, float, float] | None = None  # (|diff|, -sens, thr, spec)
    for thr in sorted(set(scores.tolist())):
        predicted_pos = scores >= thr
        fpr = float((predicted_pos & ~is_pos).sum()) / n_neg
        fnr = float((~predicted_pos & is_pos).sum()) / n_pos
        candidate = (abs(fpr - fnr), -(1.0 - fnr), thr, 1.0 - fpr)
        if best is None or candidate[:2] < best[:2]:
            best = candidate
    assert best is not None
    return EerOperatingPoint(threshold=best[2], specificity=best[3], sensitivity=-best[1])


def regression_errors(records: Sequence[PredictionRecord]) -> tuple[float, float]:
    """(RMSE, MAE) of phq estimates against true scores."""
    missing = [r.session_id for r in records if r.phq_estimate is None]
    if missing:
        raise ValidationError(
            f"{len(missing)} records missing phq_estimate: {missing[:10]}"
        )
    err = np.asarray([r.phq_estimate - r.true_phq for r in records], dtype=float)
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    return rmse, mae


@dataclass(frozen=True)
class SubgroupRow:
    group: str
    size: int
    auc: float | None
    spec_at_eer: float | None
    sens_at_eer: float | None
    rmse: float | None = None
    mae: float | None = None
    flag: str | None = None

    def as_dict(self) -> dict:
        return {
            "group": self.group,
            "size": self.size,
            "auc": self.auc,
            "spec_at_eer": self.spec_at_eer,
            "sens_at_eer": self.sens_at_eer,
            "rmse": self.rmse,
            "mae": self.mae,
            "flag": self.flag,
        }


@dataclass(frozen=True)
class SubgroupReport:
    key: str
    rows: tuple[SubgroupRow, ...]
    missing_key_count: int
    total: int

    @property
    def has_flags(self) -> bool:
        return any(r.flag for r in self.rows)

    def as_dict(self) -> dict:
        return {
            "key": self.key,
            "rows": [r.as_dict() for r in self.rows],
            "missing_key_count": self.missing_key_count,
            "total": self.total,
        }


def _subgroup_key_value(record: PredictionRecord, key: str) -> str | None:
    demo = record.demographics
    if key == "age_bucket":
        return demo.resolved_age_bucket() if demo else None
    if key == "gender":
        if demo is None or demo.gender == "unspecified":
            return None
        return demo.gender
    if key == "ethnicity":
        return demo.ethnicity if demo else None
    if key == "consistency":
        return record.consistency.value if record.consistency else None
    raise ValidationError(f"unknown subgroup key {key!r}; expected one of {SUBGROUP_KEYS}")


def _metric_row(group: str, records: Sequence[PredictionRecord]) -> SubgroupRow:
    size = len(records)
    rmse = mae = None
    if size and all(r.phq_estimate is not None for r in records):
        rmse, mae = regression_errors(records)
    try:
        auc = roc_auc(records)
        op = eer_operating_point(records)
    except MetricUndefinedError as e:
        return SubgroupRow(
            group=group, size=size, auc=None, spec_at_eer=None, sens_at_eer=None,
            rmse=rmse, mae=mae, flag=str(e),
        )
    return SubgroupRow(
        group=group, size=size, auc=auc,
        spec_at_eer=op.specificity, sens_at_eer=op.sensitivity,
        rmse=rmse, mae=mae,
    )


_CANONICAL_ORDER = {
    "age_bucket": list(AGE_BUCKETS),
    "gender": ["female", "male"],
    "consistency": ["consistent", "inconsistent"],
}


def subgroup_report(records: Sequence[PredictionRecord], key: str) -> SubgroupReport:
    """Per-subgroup size, AUC, and spec/sens at EER, computed within the subgroup.

    Records missing the key are excluded and counted; subgroups where the
    metric preconditions fail are flagged rather than dropped.
    """
    if not records:
        raise ValidationError("subgroup_report requires at least one record")
    groups: dict[str, list[PredictionRecord]] = {}
    missing = 0
    for r in records:
        value = _subgroup_key_value(r, key)
        if value is None:
            missing += 1
        else:
            groups.setdefault(value, []).append(r)
    if key in _CANONICAL_ORDER:
        ordered = [g for g in _CANONICAL_ORDER[key] if g in groups]
        ordered += sorted(g for g in groups if g not in _CANONICAL_ORDER[key])
    else:
        ordered = sorted(groups, key=lambda g: (-len(groups[g]), g))
    rows = tuple(_metric_row(g, groups[g]) for g in ordered)
    return SubgroupReport(key=key, rows=rows, missing_key_count=missing, total=len(records))


@dataclass(frozen=True)
class SweepSide:
    size: int
    auc: float | None
    flag: str | None = None

    def as_dict(self) -> dict:
        return {"size": self.size, "auc": self.auc, "flag": self.flag}


@dataclass(frozen=True)
class SweepPoint:
    threshold: int
    below: SweepSide
    beyond: SweepSide

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "below": self.below.as_dict(),
            "beyond": self.beyond.as_dict(),
        }


def _sweep_side(records: Sequence[PredictionRecord]) -> SweepSide:
    if not records:
        return SweepSide(size=0, auc=None, flag="empty")
    try:
        return SweepSide(size=len(records), auc=roc_auc(records))
    except MetricUndefinedError as e:
        return SweepSide(size=len(records), auc=None, flag=str(e))


def age_threshold_sweep(
    records: Sequence[PredictionRecord], thresholds: Iterable[int]
) -> list[SweepPoint]:
    """For each age threshold a, AUC of the {age < a} and {age >= a} groups.

    Sizes are reported alongside so sparsity artifacts stay visible. Records
    with no numeric age are dropped; it is an error if none remains.
    """
    aged = [r for r in records if r.demographics is not None and r.demographics.age is not None]
    if not aged:
        raise ValidationError("age_threshold_sweep: no record has a numeric age")
    points = []
    for thr in thresholds:
        below = [r for r in aged if r.demographics.age < thr]
        beyond = [r for r in aged if r.demographics.age >= thr]
        points.append(
            SweepPoint(threshold=int(thr), below=_sweep_side(below), beyond=_sweep_side(beyond))
        )
    return points


@dataclass(frozen=True)
class ConsistencySplit:
    consistent: SweepSide
    inconsistent: SweepSide

    def as_dict(self) -> dict:
        return {
            "consistent": self.consistent.as_dict(),
            "inconsistent": self.inconsistent.as_dict(),
        }


def consistency_split_eval(records: Sequence[PredictionRecord]) -> ConsistencySplit:
    """Session-level AUC within each subject-consistency stratum.

    Sessions are still scored independently; only the stratification uses the
    subject's full longitudinal history.
    """
    missing = [r.session_id for r in records if r.consistency is None]
    if missing:
        raise ValidationError(
            f"{len(missing)} records missing consistency labels: {missing[:10]}"
        )
    consistent = [r for r in records if r.consistency is ConsistencyLabel.CONSISTENT]
    inconsistent = [r for r in records if r.consistency is ConsistencyLabel.INCONSISTENT]
    return ConsistencySplit(
        consistent=_sweep_side(consistent), inconsistent=_sweep_side(inconsistent)
    )


class BootstrapCI(NamedTuple):
    lower: float
    upper: float
    n_redrawn: int


_METRIC_FNS: dict[str, Callable[[Sequence[PredictionRecord]], float]] = {
    "auc": roc_auc,
    "rmse": lambda recs: regression_errors(recs)[0],
    "mae": lambda recs: regression_errors(recs)[1],
}


def bootstrap_ci(
    records: Sequence[PredictionRecord],
    metric: str,
    n_resamples: int = 1000,
    alpha: float = 0.1,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap over session-level resampling.

    Resamples violating the metric's preconditions are redrawn and counted;
    more than 50% invalid draws aborts.
    """
    if metric not in _METRIC_FNS:
        raise ValidationError(f"unknown metric {metric!r}; expected one of {sorted(_METRIC_FNS)}")
    fn = _METRIC_FNS[metric]
    fn(records)  # preconditions must hold on the full set
    rng = np.random.default_rng(seed)
    n = len(records)
    values: list[float] = []
    n_redrawn = 0
    while len(values) < n_resamples:
        idx = rng.integers(0, n, size=n)
        sample = [records[i] for i in idx]
        try:
            values.append(fn(sample))
        except MetricUndefinedError:
            n_redrawn += 1
            if n_redrawn > n_resamples:
                raise MetricUndefinedError(
                    f"bootstrap_ci: more than 50% of resamples invalid "
                    f"({n_redrawn} redraws for {len(values)} valid)"
                )
    lower, upper = np.quantile(np.asarray(values), [alpha / 2.0, 1.0 - alpha / 2.0])
    return BootstrapCI(lower=float(lower), upper=float(upper), n_redrawn=n_redrawn)


# ---------------------------------------------------------------------------
# Prediction CSV <-> record plumbing

PREDICTIONS_FIELDS = (
    "session_id",
    "subject_id",
    "score_dep_plus",
    "phq_estimate",
    "true_phq",
    "true_class",
)


def write_predictions_csv(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PREDICTIONS_FIELDS)
        writer.writeheader()
        for r in records:
            writer.writerow(
                {
                    "session_id": r.session_id,
                    "subject_id": r.subject_id,
                    "score_dep_plus": repr(r.score),
                    "phq_estimate": "" if r.phq_estimate is None else repr(r.phq_estimate),
                    "true_phq": r.true_phq,
                    "true_class": r.true_class.label,
                }
            )


def load_predictions_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = set(PREDICTIONS_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"predictions CSV missing columns: {sorted(missing)}")
        return list(reader)


def join_predictions(rows: Sequence[dict], corpus: Corpus) -> list[PredictionRecord]:
    """Join prediction rows to corpus metadata by session_id.

    Consistency labels come from the subject's full session history in the
    corpus. Unjoinable rows are an error listing their count and ids.
    """
    session_index: dict[str, tuple] = {}
    for subj in corpus.subjects:
        label = label_subject_consistency(subj)
        for session in subj.sessions:
            session_index[session.session_id] = (session, subj, label)
    records: list[PredictionRecord] = []
    unmatched: list[str] = []
    for row in rows:
        sid = row["session_id"]
        if sid not in session_index:
            unmatched.append(sid)
            continue
        session, subj, label = session_index[sid]
        estimate = row.get("phq_estimate", "")
        records.append(
            PredictionRecord(
                session_id=sid,
                subject_id=session.subject_id,
                score=float(row["score_dep_plus"]),
                true_phq=session.phq8_score,
                true_class=session.depression_class,
                phq_estimate=float(estimate) if estimate not in ("", None) else None,
                demographics=subj.demographics,
                consistency=label,
            )
        )
    if unmatched:
        raise ValidationError(
            f"{len(unmatched)} prediction rows not joinable to corpus: {unmatched[:10]}"
        )
    return records
