"""Patient aggregation, weighted evaluation, model joins, reader pooling."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_records

from gjeval import (
    ClassLabel,
    Dataset,
    PredictionRecord,
    ReaderRecord,
    evaluate,
    group_vs_group_kappa,
    inverse_count_weights,
    join_predictions,
    model_vs_reader_tests,
    patient_max_aggregate,
    patient_mean_aggregate,
    per_reader_points,
    pool_readers,
    reader_group_report,
)
from gjeval.aggregate import LEVELS


def two_patient_dataset():
    """pa: 2 images of A-EGJA; pb: 3 images of control."""
    truths = [0, 0, 2, 2, 2]
    probs = [
        (0.6, 0.3, 0.1),
        (0.2, 0.5, 0.3),
        (0.1, 0.2, 0.7),
        (0.3, 0.3, 0.4),
        (0.2, 0.1, 0.7),
    ]
    pids = ["pa", "pa", "pb", "pb", "pb"]
    return make_records(truths, probs, pids)


class TestPatientAggregation:
    def test_mean_is_image_average(self):
        ds = two_patient_dataset()
        agg = patient_mean_aggregate(ds)
        by_id = {p.patient_id: p for p in agg}
        pa = by_id["pa"]
        assert pa.probs[0] == pytest.approx((0.6 + 0.2) / 2)
        assert pa.probs[1] == pytest.approx((0.3 + 0.5) / 2)
        assert pa.n_images == 2
        assert sum(pa.probs) == pytest.approx(1.0)

    def test_max_renormalizes(self):
        ds = two_patient_dataset()
        agg = patient_max_aggregate(ds)
        by_id = {p.patient_id: p for p in agg}
        pa = by_id["pa"]
        # elementwise max (0.6, 0.5, 0.3) renormalized to sum 1
        assert pa.probs[0] == pytest.approx(0.6 / 1.4)
        assert pa.probs[1] == pytest.approx(0.5 / 1.4)
        assert sum(pa.probs) == pytest.approx(1.0)

    def test_severity_tie_break_after_aggregation(self):
        # mean probs tie between E-EGJA and control -> E-EGJA (more severe)
        truths = [1, 1]
        probs = [(0.2857, 0.4286, 0.2857), (0.2857, 0.2857, 0.4286)]
        ds = make_records(truths, probs, ["px", "px"])
        (pat,) = patient_mean_aggregate(ds)
        assert pat.probs[1] == pytest.approx(pat.probs[2])
        assert pat.pred == ClassLabel.EEGJA

    def test_preserves_truth(self):
        ds = two_patient_dataset()
        for agg in (patient_mean_aggregate(ds), patient_max_aggregate(ds)):
            for p in agg:
                assert p.truth == ds.patient_truth(p.patient_id)


class TestInverseCountWeights:
    def test_weights_sum_to_patient_count(self):
        ds = two_patient_dataset()
        w = inverse_count_weights(ds)
        assert w.shape == (5,)
        assert w.sum() == pytest.approx(2.0)  # one unit of mass per patient
        assert w[0] == pytest.approx(0.5)
        assert w[2] == pytest.approx(1 / 3)


class TestEvaluateLevels:
    def test_levels_exposed(self):
        assert LEVELS == ("image", "patient", "weighted")

    def test_image_level_counts(self, small_dataset):
        rep = evaluate(small_dataset, "image")
        assert rep.level == "image"
        assert rep.n == 9
        assert rep.cm.total == 9

    def test_patient_level_counts(self, small_dataset):
        rep = evaluate(small_dataset, "patient")
        assert rep.n == 5
        assert rep.cm.total == 5

    def test_weighted_level_effective_n(self, small_dataset):
        rep = evaluate(small_dataset, "weighted")
        assert rep.n == pytest.approx(5.0)  # total weight = patient count
        assert rep.cm.total == pytest.approx(5.0)

    def test_unknown_level_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            evaluate(small_dataset, "reader")

    def test_renormalized_warning_attached(self):
        from gjeval import parse_predictions

        text = (
            "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n"
            "i1,p1,A-EGJA,0.5004,0.3,0.2\n"
            "i2,p2,control,0.2,0.2,0.6\n"
        )
        rep = evaluate(parse_predictions(text), "image")
        assert any("renormalized" in w for w in rep.warnings)

    def test_single_image_patients_image_equals_patient(self):
        truths = [0, 1, 2, 0, 1, 2]
        probs = [
            (0.7, 0.2, 0.1), (0.1, 0.7, 0.2), (0.2, 0.1, 0.7),
            (0.5, 0.4, 0.1), (0.3, 0.5, 0.2), (0.1, 0.3, 0.6),
        ]
        ds = make_records(truths, probs)  # distinct patient per image
        r_img = evaluate(ds, "image")
        r_pat = evaluate(ds, "patient")
        r_wtd = evaluate(ds, "weighted")
        assert r_img.cm == r_pat.cm
        assert r_img.overall.accuracy.value == pytest.approx(r_wtd.overall.accuracy.value)
        assert r_img.auc_micro == pytest.approx(r_pat.auc_micro, abs=1e-12)


class TestJoinPredictions:
    def test_inner_join_in_first_order(self, small_dataset):
        other = Dataset.from_records(tuple(reversed(small_dataset.records))[:5])
        joined = join_predictions(small_dataset, other)
        # order follows the first dataset
        expected = [r.image_id for r in small_dataset.records if r.image_id in
                    {o.image_id for o in other.records}]
        assert list(joined.image_ids) == expected

    def test_truth_mismatch_rejected(self, small_dataset):
        rec = small_dataset.records[0]
        altered = PredictionRecord(
            image_id=rec.image_id,
            patient_id=rec.patient_id,
            truth=ClassLabel.CONTROL,
            probs=rec.probs,
        )
        other = Dataset.from_records([altered])
        with pytest.raises(ValueError, match="true label"):
            join_predictions(small_dataset, other)

    def test_empty_join_rejected(self, small_dataset):
        other = Dataset.from_records([
            PredictionRecord(
                image_id="elsewhere", patient_id="zz",
                truth=ClassLabel.AEGJA, probs=(1.0, 0.0, 0.0),
            )
        ])
        with pytest.raises(ValueError, match="common"):
            join_predictions(small_dataset, other)

    def test_paired_shape(self, small_dataset):
        joined = join_predictions(small_dataset, small_dataset)
        pp = joined.paired()
        assert len(pp.truths) == len(small_dataset.records)
        assert pp.preds_a == pp.preds_b


def reader_fixture(ds):
    """Two trainees in arm A, one expert in arm B, covering all images."""
    recs = []
    for rid, group, arm, flip in (
        ("t1", "trainee", "A", False),
        ("t2", "trainee", "A", True),
        ("e1", "expert", "B", False),
    ):
        for r in ds.records:
            pred = r.truth if not flip else ClassLabel((int(r.truth) + 1) % 3)
            recs.append(
                ReaderRecord(
                    reader_id=rid, group=group, arm=arm,
                    image_id=r.image_id, pred=pred, elapsed_s=5.0,
                )
            )
    return tuple(recs)


class TestReaderPooling:
    def test_pool_replicates_model_preds(self, small_dataset):
        readers = reader_fixture(small_dataset)
        pool = pool_readers(readers, small_dataset, "trainee", "A")
        n = len(small_dataset.records)
        assert pool.truths.size == 2 * n  # two trainees
        assert sorted(set(pool.reader_ids)) == ["t1", "t2"]
        by_img = {r.image_id: r.pred for r in small_dataset.records}
        for img, mp in zip(pool.image_ids, pool.model_preds):
            assert mp == int(by_img[img])

    def test_mean_elapsed(self, small_dataset):
        readers = reader_fixture(small_dataset)
        pool = pool_readers(readers, small_dataset, "expert", "B")
        assert pool.mean_elapsed_s == pytest.approx(5.0)

    def test_dangling_image_rejected(self, small_dataset):
        readers = reader_fixture(small_dataset) + (
            ReaderRecord(reader_id="t1", group="trainee", arm="A",
                         image_id="ghost", pred=ClassLabel.CONTROL, elapsed_s=1.0),
        )
        with pytest.raises(ValueError, match="ghost"):
            pool_readers(readers, small_dataset, "trainee", "A")

    def test_empty_cell_rejected(self, small_dataset):
        readers = reader_fixture(small_dataset)
        with pytest.raises(ValueError):
            pool_readers(readers, small_dataset, "competent", "A")

    def test_partial_elapsed_rejected(self, small_dataset):
        readers = list(reader_fixture(small_dataset))
        r0 = readers[0]
        readers[0] = ReaderRecord(
            reader_id=r0.reader_id, group=r0.group, arm=r0.arm,
            image_id=r0.image_id, pred=r0.pred, elapsed_s=None,
        )
        with pytest.raises(ValueError, match="elapsed"):
            pool_readers(tuple(readers), small_dataset, "trainee", "A")


class TestReaderReports:
    def test_group_report_no_curves(self, small_dataset):
        pool = pool_readers(reader_fixture(small_dataset), small_dataset, "expert", "B")
        rep = reader_group_report(pool)
        assert rep.auc_micro is None
        assert rep.level == "readers:expert:B"
        assert rep.time_cost_s == pytest.approx(5.0)
        # e1 reproduces truth exactly
        assert rep.overall.accuracy.value == pytest.approx(1.0)

    def test_model_vs_reader_test_order(self, small_dataset):
        pool = pool_readers(reader_fixture(small_dataset), small_dataset, "expert", "B")
        tests = model_vs_reader_tests(pool)
        assert [t.name for t in tests] == ["kappa", "bowker"]
        assert "kappa" in tests[0].detail

    def test_group_vs_group_cross_join(self, small_dataset):
        readers = reader_fixture(small_dataset)
        pool_a = pool_readers(readers, small_dataset, "trainee", "A")
        pool_b = pool_readers(readers, small_dataset, "expert", "B")
        res = group_vs_group_kappa(pool_a, pool_b)
        # 2 trainees x 1 expert x 9 images = 18 cross pairs
        assert res.detail["n_pairs"] == 18
        assert "kappa" in res.detail

    def test_per_reader_points_sorted_cells(self, small_dataset):
        pts = per_reader_points(reader_fixture(small_dataset), small_dataset)
        # 3 readers x 3 classes
        assert len(pts) == 9
        keys = [(p["group"], p["arm"], p["reader_id"], p["class"]) for p in pts]
        assert keys == sorted(keys, key=lambda k: (
            ("trainee", "competent", "expert").index(k[0]), k[1], k[2],
            ("A-EGJA", "E-EGJA", "control").index(k[3]),
        ))
        perfect = [p for p in pts if p["reader_id"] == "e1"]
        for p in perfect:
            assert p["sensitivity"] in (None, pytest.approx(1.0))
