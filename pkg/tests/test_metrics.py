from __future__ import annotations

import math

import numpy as np
import pytest

from portalm.corpus import ConsistencyLabel, Demographics, binarize_phq
from portalm.errors import MetricUndefinedError, ValidationError
from portalm.metrics import (
    PredictionRecord,
    age_threshold_sweep,
    bootstrap_ci,
    consistency_split_eval,
    eer_operating_point,
    join_predictions,
    load_predictions_csv,
    regression_errors,
    roc_auc,
    roc_curve,
    roc_curve_area,
    subgroup_report,
    write_predictions_csv,
)

from .conftest import make_corpus


def rec(i, score, positive, **kwargs):
    phq = 15 if positive else 3
    return PredictionRecord(
        session_id=f"s{i}",
        subject_id=kwargs.pop("subject_id", f"u{i}"),
        score=score,
        true_phq=phq,
        true_class=binarize_phq(phq),
        **kwargs,
    )


def random_records(rng, n_pos, n_neg, ties=False):
    if ties:
        pos = rng.integers(0, 10, n_pos) / 10.0
        neg = rng.integers(0, 10, n_neg) / 10.0
    else:
        pos = rng.random(n_pos)
        neg = rng.random(n_neg)
    records = [rec(i, float(s), True) for i, s in enumerate(pos)]
    records += [rec(n_pos + i, float(s), False) for i, s in enumerate(neg)]
    return records


def pairwise_auc(records):
    """Brute-force oracle: mean over all (pos, neg) pairs of win/tie credit."""
    pos = [r.score for r in records if r.true_phq >= 10]
    neg = [r.score for r in records if r.true_phq < 10]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def exhaustive_eer(records):
    """Oracle: sweep every observed threshold, track min |FPR - FNR|."""
    pos = [r.score for r in records if r.true_phq >= 10]
    neg = [r.score for r in records if r.true_phq < 10]
    best = None
    for thr in sorted({r.score for r in records}):
        fpr = sum(q >= thr for q in neg) / len(neg)
        fnr = sum(p < thr for p in pos) / len(pos)
        key = (abs(fpr - fnr), -(1 - fnr))
        if best is None or key < best:
            best = key
    return best  # (min |FPR-FNR|, -sensitivity)


class TestRocAuc:
    def test_perfect_separation(self):
        records = [rec(0, 0.9, True), rec(1, 0.8, True), rec(2, 0.7, False), rec(3, 0.1, False)]
        assert roc_auc(records) == 1.0

    def test_all_ties(self):
        records = [rec(0, 0.5, True), rec(1, 0.5, False), rec(2, 0.5, True)]
        assert roc_auc(records) == 0.5

    def test_half_credit_case(self):
        records = [rec(0, 0.8, True), rec(1, 0.3, True), rec(2, 0.5, False), rec(3, 0.4, False)]
        assert roc_auc(records) == 0.5  # 2 wins, 2 losses of 4 pairs

    def test_single_class_rejected(self):
        with pytest.raises(MetricUndefinedError):
            roc_auc([rec(0, 0.5, True), rec(1, 0.2, True)])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(300):
            n_pos = int(rng.integers(1, 30))
            n_neg = int(rng.integers(1, 30))
            records = random_records(rng, n_pos, n_neg, ties=bool(trial % 2))
            assert roc_auc(records) == pairwise_auc(records)

    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            records = random_records(rng, 5, 7, ties=True)
            flipped = [
                PredictionRecord(
                    session_id=r.session_id, subject_id=r.subject_id, score=-r.score,
                    true_phq=r.true_phq, true_class=r.true_class,
                )
                for r in records
            ]
            assert roc_auc(records) + roc_auc(flipped) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        records = random_records(rng, 10, 12)
        base = roc_auc(records)
        for transform in (lambda x: x**3, lambda x: math.log(x / (1 - x + 1e-9) + 1e-9)):
            mapped = [
                PredictionRecord(
                    session_id=r.session_id, subject_id=r.subject_id,
                    score=transform(r.score), true_phq=r.true_phq, true_class=r.true_class,
                )
                for r in records
            ]
            assert roc_auc(mapped) == pytest.approx(base, abs=1e-12)


class TestRocCurve:
    def test_perfect_curve_hits_corner(self):
        records = [rec(0, 0.9, True), rec(1, 0.8, True), rec(2, 0.2, False)]
        points = [(p.fpr, p.tpr) for p in roc_curve(records)]
        assert (0.0, 1.0) in points

    def test_monotone(self):
        rng = np.random.default_rng(3)
        records = random_records(rng, 20, 20, ties=True)
        points = roc_curve(records)
        for a, b in zip(points, points[1:]):
            assert b.fpr >= a.fpr and b.tpr >= a.tpr

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(4)
        records = random_records(rng, 5000, 5000)
        assert roc_curve_area(roc_curve(records)) == pytest.approx(0.5, abs=0.05)

    def test_area_matches_pairwise_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(100):
            records = random_records(
                rng, int(rng.integers(1, 15)), int(rng.integers(1, 15)), ties=bool(trial % 2)
            )
            area = roc_curve_area(roc_curve(records))
            assert area == pytest.approx(pairwise_auc(records), abs=1e-12)


class TestEer:
    def test_separable(self):
        records = [rec(0, 0.9, True), rec(1, 0.8, True), rec(2, 0.2, False), rec(3, 0.1, False)]
        op = eer_operating_point(records)
        assert op.specificity == 1.0 and op.sensitivity == 1.0

    def test_interleaved(self):
        records = [rec(0, 0.9, True), rec(1, 0.2, True), rec(2, 0.8, False), rec(3, 0.1, False)]
        op = eer_operating_point(records)
        assert op.specificity == 0.5 and op.sensitivity == 0.5
        assert 0.2 < op.threshold <= 0.8

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n_pos = int(rng.integers(1, 40))
            n_neg = int(rng.integers(1, 40))
            records = random_records(rng, n_pos, n_neg)
            op = eer_operating_point(records)
            oracle_diff, neg_sens = exhaustive_eer(records)
            assert abs((1 - op.specificity) - (1 - op.sensitivity)) == pytest.approx(
                oracle_diff, abs=1e-12
            )
            assert op.sensitivity == pytest.approx(-neg_sens, abs=1e-12)

    def test_sparsity_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n_pos = int(rng.integers(1, 40))
            n_neg = int(rng.integers(1, 40))
            records = random_records(rng, n_pos, n_neg)
            op = eer_operating_point(records)
            assert abs(op.specificity - op.sensitivity) <= 1 / min(n_pos, n_neg) + 1e-12


class TestRegression:
    def test_exact_estimates(self):
        records = [rec(0, 0.5, True, phq_estimate=15.0), rec(1, 0.5, False, phq_estimate=3.0)]
        assert regression_errors(records) == (0.0, 0.0)

    def test_hand_case(self):
        # truth {0, 10}, estimates {2, 6}: errors {2, 4} -> mae 3, rmse sqrt(10)
        records = [
            PredictionRecord(session_id="a", subject_id="a", score=0.5, true_phq=0,
                             true_class=binarize_phq(0), phq_estimate=2.0),
            PredictionRecord(session_id="b", subject_id="b", score=0.5, true_phq=10,
                             true_class=binarize_phq(10), phq_estimate=6.0),
        ]
        rmse, mae = regression_errors(records)
        assert mae == pytest.approx(3.0)
        assert rmse == pytest.approx(math.sqrt(10.0))

    def test_rmse_ge_mae(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            records = [
                rec(i, 0.5, bool(i % 2), phq_estimate=float(rng.uniform(0, 24)))
                for i in range(10)
            ]
            rmse, mae = regression_errors(records)
            assert rmse >= mae - 1e-12

    def test_missing_estimates_listed(self):
        records = [rec(0, 0.5, True, phq_estimate=1.0), rec(1, 0.5, False)]
        with pytest.raises(ValidationError, match="s1"):
            regression_errors(records)


class TestSubgroupReport:
    def test_two_separable_gender_groups(self):
        records = []
        for gi, gender in enumerate(["female", "male"]):
            demo = Demographics(gender=gender)
            records += [
                rec(f"{gi}-0", 0.9, True, demographics=demo),
                rec(f"{gi}-1", 0.1, False, demographics=demo),
            ]
        report = subgroup_report(records, "gender")
        assert [r.group for r in report.rows] == ["female", "male"]
        assert all(r.auc == 1.0 for r in report.rows)

    def test_schema_columns(self):
        demo = Demographics(ethnicity="caucasian")
        records = [rec(0, 0.9, True, demographics=demo), rec(1, 0.1, False, demographics=demo)]
        report = subgroup_report(records, "ethnicity")
        row = report.rows[0].as_dict()
        assert {"group", "size", "auc", "spec_at_eer", "sens_at_eer"} <= set(row)

    def test_sizes_partition(self):
        records = [
            rec(0, 0.9, True, demographics=Demographics(age=30)),
            rec(1, 0.5, False, demographics=Demographics(age=70)),
            rec(2, 0.4, False, demographics=Demographics()),  # no age -> missing
        ]
        report = subgroup_report(records, "age_bucket")
        assert sum(r.size for r in report.rows) + report.missing_key_count == len(records)

    def test_single_class_subgroup_flagged(self):
        records = [
            rec(0, 0.9, True, demographics=Demographics(gender="female")),
            rec(1, 0.2, False, demographics=Demographics(gender="female")),
            rec(2, 0.8, True, demographics=Demographics(gender="male")),
        ]
        report = subgroup_report(records, "gender")
        male = next(r for r in report.rows if r.group == "male")
        assert male.auc is None and male.flag

    def test_unspecified_gender_counts_missing(self):
        records = [
            rec(0, 0.9, True, demographics=Demographics(gender="unspecified")),
            rec(1, 0.2, False, demographics=Demographics(gender="female")),
        ]
        report = subgroup_report(records, "gender")
        assert report.missing_key_count == 1

    def test_rows_match_manual_recompute(self):
        rng = np.random.default_rng(9)
        records = []
        for i in range(40):
            gender = "female" if i % 3 else "male"
            records.append(
                rec(i, float(rng.random()), bool(i % 2),
                    demographics=Demographics(gender=gender))
            )
        report = subgroup_report(records, "gender")
        for row in report.rows:
            manual = [r for r in records if r.demographics.gender == row.group]
            assert row.auc == roc_auc(manual)
            op = eer_operating_point(manual)
            assert row.spec_at_eer == op.specificity
            assert row.sens_at_eer == op.sensitivity


class TestAgeSweep:
    def _aged_records(self, rng, n=40):
        return [
            rec(i, float(rng.random()), bool(i % 2),
                demographics=Demographics(age=int(rng.integers(18, 90))))
            for i in range(n)
        ]

    def test_below_min_age_flagged(self):
        rng = np.random.default_rng(10)
        records = self._aged_records(rng)
        min_age = min(r.demographics.age for r in records)
        points = age_threshold_sweep(records, [min_age - 1])
        assert points[0].below.size == 0 and points[0].below.flag == "empty"
        assert points[0].beyond.auc == roc_auc(records)

    def test_below_size_monotone(self):
        rng = np.random.default_rng(11)
        records = self._aged_records(rng)
        points = age_threshold_sweep(records, range(20, 90, 5))
        sizes = [p.below.size for p in points]
        assert sizes == sorted(sizes)

    def test_no_age_rejected(self):
        records = [rec(0, 0.9, True), rec(1, 0.1, False)]
        with pytest.raises(ValidationError):
            age_threshold_sweep(records, [50])


class TestConsistencySplit:
    def test_all_consistent_flags_empty_stratum(self):
        records = [
            rec(0, 0.9, True, consistency=ConsistencyLabel.CONSISTENT),
            rec(1, 0.1, False, consistency=ConsistencyLabel.CONSISTENT),
        ]
        split = consistency_split_eval(records)
        assert split.inconsistent.size == 0 and split.inconsistent.flag == "empty"
        assert split.consistent.auc == 1.0

    def test_sizes_partition(self):
        records = [
            rec(0, 0.9, True, consistency=ConsistencyLabel.CONSISTENT),
            rec(1, 0.1, False, consistency=ConsistencyLabel.INCONSISTENT),
            rec(2, 0.4, False, consistency=ConsistencyLabel.CONSISTENT),
        ]
        split = consistency_split_eval(records)
        assert split.consistent.size + split.inconsistent.size == len(records)

    def test_missing_labels_rejected(self):
        with pytest.raises(ValidationError):
            consistency_split_eval([rec(0, 0.9, True)])


class TestBootstrap:
    def test_zero_variance_rmse(self):
        records = [rec(i, 0.5, bool(i % 2),
                       phq_estimate=float(15 if i % 2 else 3)) for i in range(10)]
        ci = bootstrap_ci(records, "rmse", n_resamples=100, alpha=0.1, seed=0)
        assert ci.lower == 0.0 and ci.upper == 0.0

    def test_contains_point_estimate(self):
        rng = np.random.default_rng(12)
        records = random_records(rng, 30, 30)
        point = roc_auc(records)
        ci = bootstrap_ci(records, "auc", n_resamples=500, alpha=0.1, seed=1)
        assert ci.lower <= point <= ci.upper

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        records = random_records(rng, 10, 10)
        a = bootstrap_ci(records, "auc", n_resamples=200, seed=5)
        b = bootstrap_ci(records, "auc", n_resamples=200, seed=5)
        assert a == b

    def test_width_shrinks_with_n(self):
        rng = np.random.default_rng(14)
        small = random_records(rng, 40, 40)
        big = small * 10  # 10x records, same distribution
        w_small = np.diff(bootstrap_ci(small, "auc", n_resamples=400, seed=2)[:2])[0]
        w_big = np.diff(bootstrap_ci(big, "auc", n_resamples=400, seed=2)[:2])[0]
        assert w_big < w_small / 2  # ~ sqrt(10) ≈ 3.2x shrink expected

    def test_mostly_invalid_resamples_rejected(self):
        # one positive among many negatives: resamples frequently lose the positive
        records = [rec(0, 0.9, True)] + [rec(i + 1, 0.1, False) for i in range(2)]
        with pytest.raises(MetricUndefinedError):
            bootstrap_ci(records, "auc", n_resamples=2000, seed=3)


class TestPredictionsIO:
    def test_csv_round_trip_and_join(self, tmp_path):
        corpus = make_corpus([[15], [3], [12, 4]])
        records = []
        for subj in corpus.subjects:
            for s in subj.sessions:
                records.append(
                    PredictionRecord(
                        session_id=s.session_id, subject_id=s.subject_id,
                        score=0.25, true_phq=s.phq8_score,
                        true_class=s.depression_class, phq_estimate=1.25,
                    )
                )
        path = tmp_path / "preds.csv"
        write_predictions_csv(records, path)
        joined = join_predictions(load_predictions_csv(path), corpus)
        assert len(joined) == len(records)
        assert all(r.consistency is not None for r in joined)
        assert all(r.demographics is not None for r in joined)
        mixed = [r for r in joined if r.subject_id == "subj002"]
        assert all(r.consistency is ConsistencyLabel.INCONSISTENT for r in mixed)

    def test_unjoinable_rows_rejected(self, tmp_path):
        corpus = make_corpus([[15], [3]])
        records = [
            PredictionRecord(session_id="ghost", subject_id="g", score=0.5,
                             true_phq=15, true_class=binarize_phq(15))
        ]
        path = tmp_path / "preds.csv"
        write_predictions_csv(records, path)
        with pytest.raises(ValidationError, match="ghost"):
            join_predictions(load_predictions_csv(path), corpus)

    def test_score_precision_survives(self, tmp_path):
        corpus = make_corpus([[15], [3]])
        sid = corpus.subjects[0].sessions[0].session_id
        sid2 = corpus.subjects[1].sessions[0].session_id
        records = [
            PredictionRecord(session_id=sid, subject_id="subj000",
                             score=0.123456789012345678, true_phq=15,
                             true_class=binarize_phq(15)),
            PredictionRecord(session_id=sid2, subject_id="subj001",
                             score=1 / 3, true_phq=3, true_class=binarize_phq(3)),
        ]
        path = tmp_path / "preds.csv"
        write_predictions_csv(records, path)
        joined = join_predictions(load_predictions_csv(path), corpus)
        assert joined[0].score == records[0].score
        assert joined[1].score == records[1].score
