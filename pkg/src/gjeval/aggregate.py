"""Aggregation layers on top of image-level predictions: patient-level
roll-ups, inverse-count weighting, analysis-level evaluation, reader-study
pooling, and demographic subgroup slicing.

Analysis levels
---------------
image     one record per image, unit weights.
patient   per-patient probabilities are the arithmetic mean of that
          patient's image probabilities; the call is the severity-tie-broken
          argmax of the mean. n = number of patients.
weighted  image-level records weighted by 1 / (images of the same patient),
          so every patient contributes total mass 1 and the effective n
          equals the patient count. Confidence intervals and curves all use
          the weighted counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import CLASS_ORDER, ClassLabel, Dataset, ReaderRecord, argmax_severity
from .metrics import MetricReport, compute_report
from .stats import PairedPredictions, TestResult, bowker_test, delong_test, kappa_test

__all__ = [
    "PatientPrediction",
    "PooledReaderPairs",
    "JoinedPredictions",
    "patient_mean_aggregate",
    "patient_max_aggregate",
    "inverse_count_weights",
    "evaluate",
    "join_predictions",
    "pool_readers",
    "reader_group_report",
    "model_vs_reader_tests",
    "group_vs_group_kappa",
]

LEVELS = ("image", "patient", "weighted")


@dataclass(frozen=True)
class PatientPrediction:
    """One patient's aggregated probabilities and call."""

    patient_id: str
    truth: ClassLabel
    probs: tuple[float, float, float]
    n_images: int

    @property
    def pred(self) -> ClassLabel:
        return argmax_severity(self.probs)


def _aggregate(ds: Dataset, reducer: str) -> tuple[PatientPrediction, ...]:
    if len(ds) == 0:
        raise ValueError("cannot aggregate an empty dataset")
    out = []
    probs = ds.probs_matrix()
    for pid, positions in ds.patient_index.items():
        block = probs[list(positions)]
        if reducer == "mean":
            agg = block.mean(axis=0)
        else:
            agg = block.max(axis=0)
            s = agg.sum()
            if s > 0:
                agg = agg / s
        out.append(
            PatientPrediction(
                patient_id=pid,
                truth=ds.records[positions[0]].truth,
                probs=(float(agg[0]), float(agg[1]), float(agg[2])),
                n_images=len(positions),
            )
        )
    return tuple(out)


def patient_mean_aggregate(ds: Dataset) -> tuple[PatientPrediction, ...]:
    """Mean of image probabilities per patient; ties break toward severity."""
    return _aggregate(ds, "mean")


def patient_max_aggregate(ds: Dataset) -> tuple[PatientPrediction, ...]:
    """Elementwise max of image probabilities per patient, renormalized to sum 1."""
    return _aggregate(ds, "max")


def inverse_count_weights(ds: Dataset) -> np.ndarray:
    """Per-record weights 1 / (images of that record's patient).

    Weights sum to the number of patients, so weighted analyses use the
    patient count as their effective sample size.
    """
    counts = {pid: len(pos) for pid, pos in ds.patient_index.items()}
    return np.array([1.0 / counts[r.patient_id] for r in ds.records], dtype=np.float64)


def evaluate(ds: Dataset, level: str = "image", workers: int = 1) -> MetricReport:
    """Full metric bundle for a dataset at one analysis level."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    warnings = []
    if ds.renormalized:
        warnings.append(f"{ds.renormalized} record(s) had probabilities renormalized at parse time")
    if level == "image":
        return compute_report(
            ds.truth_array(), ds.pred_array(), ds.probs_matrix(),
            level="image", extra_warnings=warnings, workers=workers,
        )
    if level == "patient":
        pats = patient_mean_aggregate(ds)
        truths = np.array([p.truth for p in pats], dtype=np.int64)
        preds = np.array([p.pred for p in pats], dtype=np.int64)
        probs = np.array([p.probs for p in pats], dtype=np.float64)
        return compute_report(
            truths, preds, probs, level="patient", extra_warnings=warnings, workers=workers,
        )
    weights = inverse_count_weights(ds)
    return compute_report(
        ds.truth_array(), ds.pred_array(), ds.probs_matrix(), weights=weights,
        level="weighted", extra_warnings=warnings, workers=workers,
    )


@dataclass(frozen=True)
class JoinedPredictions:
    """Two models' records joined on image_id, in first-dataset order."""

    image_ids: tuple[str, ...]
    truths: np.ndarray
    preds_a: np.ndarray
    preds_b: np.ndarray
    probs_a: np.ndarray
    probs_b: np.ndarray

    def paired(self) -> PairedPredictions:
        return PairedPredictions(
            truths=tuple(int(v) for v in self.truths),
            preds_a=tuple(int(v) for v in self.preds_a),
            preds_b=tuple(int(v) for v in self.preds_b),
        )


def join_predictions(ds_a: Dataset, ds_b: Dataset) -> JoinedPredictions:
    """Inner-join two prediction datasets on image_id.

    Truths must agree on every joined image; an empty join is an error.
    """
    by_id_b = {r.image_id: r for r in ds_b.records}
    ids, truths, pa, pb, qa, qb = [], [], [], [], [], []
    for ra in ds_a.records:
        rb = by_id_b.get(ra.image_id)
        if rb is None:
            continue
        if rb.truth != ra.truth:
            raise ValueError(f"true label mismatch for image {ra.image_id!r}")
        ids.append(ra.image_id)
        truths.append(int(ra.truth))
        pa.append(int(ra.pred))
        pb.append(int(rb.pred))
        qa.append(ra.probs)
        qb.append(rb.probs)
    if not ids:
        raise ValueError("no common image_ids between the two prediction sets")
    return JoinedPredictions(
        image_ids=tuple(ids),
        truths=np.array(truths, dtype=np.int64),
        preds_a=np.array(pa, dtype=np.int64),
        preds_b=np.array(pb, dtype=np.int64),
        probs_a=np.array(qa, dtype=np.float64),
        probs_b=np.array(qb, dtype=np.float64),
    )


@dataclass(frozen=True)
class PooledReaderPairs:
    """All observations of one (group, arm) cell, joined to the model's data.

    One row per reader-image observation: the model's prediction is
    replicated once per reader observation of that image, so reader and
    model see identical observation counts in pooled comparisons.
    """

    group: str
    arm: str
    reader_ids: tuple[str, ...]
    image_ids: tuple[str, ...]
    obs_reader: tuple[str, ...]
    truths: np.ndarray
    reader_preds: np.ndarray
    model_preds: np.ndarray
    elapsed_s: np.ndarray | None  # None when the study recorded no timings

    @property
    def mean_elapsed_s(self) -> float | None:
        if self.elapsed_s is None:
            return None
        return float(self.elapsed_s.mean())


def pool_readers(
    readers: Sequence[ReaderRecord], model: Dataset, group: str, arm: str
) -> PooledReaderPairs:
    """Pool every reader observation of one (group, arm) cell against the model.

    Reader records joining to no model image are an error (the model dataset
    defines the image universe).
    """
    by_id = {r.image_id: r for r in model.records}
    cell = [r for r in readers if r.group == group and r.arm == arm]
    if not cell:
        raise ValueError(f"no reader records for group={group!r} arm={arm!r}")
    truths, rpred, mpred, obs_reader, image_ids = [], [], [], [], []
    elapsed = []
    any_elapsed = any(r.elapsed_s is not None for r in cell)
    for r in cell:
        m = by_id.get(r.image_id)
        if m is None:
            raise ValueError(f"reader record references unknown image {r.image_id!r}")
        truths.append(int(m.truth))
        rpred.append(int(r.pred))
        mpred.append(int(m.pred))
        obs_reader.append(r.reader_id)
        image_ids.append(r.image_id)
        if any_elapsed:
            if r.elapsed_s is None:
                raise ValueError(f"missing elapsed_s for reader {r.reader_id!r} image {r.image_id!r}")
            elapsed.append(r.elapsed_s)
    return PooledReaderPairs(
        group=group,
        arm=arm,
        reader_ids=tuple(sorted({r.reader_id for r in cell})),
        image_ids=tuple(image_ids),
        obs_reader=tuple(obs_reader),
        truths=np.array(truths, dtype=np.int64),
        reader_preds=np.array(rpred, dtype=np.int64),
        model_preds=np.array(mpred, dtype=np.int64),
        elapsed_s=np.array(elapsed, dtype=np.float64) if any_elapsed else None,
    )


def reader_group_report(pool: PooledReaderPairs) -> MetricReport:
    """Metric bundle for a pooled reader cell (no probabilities, so no curves)."""
    return compute_report(
        pool.truths,
        pool.reader_preds,
        probs=None,
        level=f"readers:{pool.group}:{pool.arm}",
        time_cost_s=pool.mean_elapsed_s,
    )


def model_vs_reader_tests(pool: PooledReaderPairs) -> list[TestResult]:
    """Agreement (kappa) and symmetry (Bowker) between model and pooled readers."""
    pairs = PairedPredictions(
        truths=tuple(int(v) for v in pool.truths),
        preds_a=tuple(int(v) for v in pool.model_preds),
        preds_b=tuple(int(v) for v in pool.reader_preds),
    )
    return [kappa_test(pool.model_preds, pool.reader_preds), bowker_test(pairs)]


def group_vs_group_kappa(pool_x: PooledReaderPairs, pool_y: PooledReaderPairs) -> TestResult:
    """Kappa between two reader cells over their common images.

    Observations are paired by the cross product of readers within each
    image: every reader call in one cell is matched with every call on the
    same image in the other cell. This pools inter-reader variability
    symmetrically without singling out any reader correspondence.
    """
    by_img_x: dict[str, list[int]] = {}
    for img, pred in zip(pool_x.image_ids, pool_x.reader_preds):
        by_img_x.setdefault(img, []).append(int(pred))
    a, b = [], []
    for img, pred_y in zip(pool_y.image_ids, pool_y.reader_preds):
        for pred_x in by_img_x.get(img, ()):
            a.append(pred_x)
            b.append(int(pred_y))
    if not a:
        raise ValueError(
            f"no common images between cells {pool_x.group}/{pool_x.arm} and {pool_y.group}/{pool_y.arm}"
        )
    res = kappa_test(a, b)
    res.detail["n_pairs"] = len(a)
    return res


def per_reader_points(
    readers: Sequence[ReaderRecord], model: Dataset
) -> list[dict]:
    """Per-reader, per-class sensitivity/specificity/PPV rows for scatter plots."""
    from .metrics import class_stats, confusion_matrix

    from .data import READER_GROUPS

    by_id = {r.image_id: r for r in model.records}
    cells: dict[tuple[str, str, str], list[ReaderRecord]] = {}
    for r in readers:
        cells.setdefault((r.reader_id, r.group, r.arm), []).append(r)
    rows = []
    # presentation order: trainee, competent, expert; then arm, then reader
    cell_order = sorted(cells, key=lambda k: (READER_GROUPS.index(k[1]), k[2], k[0]))
    for reader_id, group, arm in cell_order:
        recs = cells[(reader_id, group, arm)]
        truths, preds = [], []
        for r in recs:
            m = by_id.get(r.image_id)
            if m is None:
                raise ValueError(f"reader record references unknown image {r.image_id!r}")
            truths.append(int(m.truth))
            preds.append(int(r.pred))
        cm = confusion_matrix(truths, preds)
        for cls in CLASS_ORDER:
            st = class_stats(cm, cls)
            rows.append(
                {
                    "reader_id": reader_id,
                    "group": group,
                    "arm": arm,
                    "class": cls.display,
                    "sensitivity": st.sensitivity.value,
                    "specificity": st.specificity.value,
                    "ppv": st.ppv.value,
                }
            )
    return rows
