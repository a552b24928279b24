"""Corpus-level evaluation: ranking metrics (MAP, MRR, top-k agreement) and
binary classification metrics (accuracy, sensitivity, specificity; micro and
macro) against ground-truth UD labels.

Ranking metrics are computed only over patients whose ground truth contains
at least one UD. Ground-truth labels may include lesions absent from the
ranking (lesions the pipeline failed to detect, entered under sentinel ids);
an absent UD contributes zero precision to AP, cannot serve as the first
ranked UD for RR, and fails top-k — so misses are penalized, not ignored.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .scoring import PatientReport
from .tiling import BoundingBox, iou

LABEL_UD = "ud"
LABEL_COMMON = "common"
EVAL_FORMAT_VERSION = 1

TOPK_ANY = "any"
TOPK_ALL = "all"


@dataclass
class GroundTruth:
    patient_id: str
    labels: dict[int, str]

    def __post_init__(self) -> None:
        for lid, label in self.labels.items():
            if label not in (LABEL_UD, LABEL_COMMON):
                raise ValueError(f"bad label {label!r} for lesion {lid}")

    @property
    def ud_ids(self) -> set[int]:
        return {lid for lid, lab in self.labels.items() if lab == LABEL_UD}


@dataclass
class BinaryMetrics:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None


@dataclass
class EvalResult:
    map_: float | None
    mrr: float | None
    top3_agreement: float | None
    top7_agreement: float | None
    micro: BinaryMetrics
    macro: BinaryMetrics
    counts: dict


def average_precision(ranking: Sequence[int], labels: Mapping[int, str]) -> float | None:
    """Mean over all labelled UDs of precision-at-their-rank; UDs absent from
    the ranking contribute 0. None when the labels contain no UD."""
    ud_ids = {lid for lid, lab in labels.items() if lab == LABEL_UD}
    if not ud_ids:
        return None
    hits = 0
    precision_sum = 0.0
    for position, lid in enumerate(ranking, start=1):
        if lid in ud_ids:
            hits += 1
            precision_sum += hits / position
    return precision_sum / len(ud_ids)


def reciprocal_rank(ranking: Sequence[int], labels: Mapping[int, str]) -> float | None:
    """1 / rank of the first UD in the ranking; 0 when no labelled UD was
    ranked; None when the labels contain no UD."""
    ud_ids = {lid for lid, lab in labels.items() if lab == LABEL_UD}
    if not ud_ids:
        return None
    for position, lid in enumerate(ranking, start=1):
        if lid in ud_ids:
            return 1.0 / position
    return 0.0


def topk_agreement(ranking: Sequence[int], labels: Mapping[int, str], k: int,
                   semantics: str = TOPK_ANY) -> int | None:
    """1 when UDs reach the top k. `any`: at least one UD ranked <= k;
    `all`: every labelled UD ranked <= k. None when no UD is labelled."""
    if semantics not in (TOPK_ANY, TOPK_ALL):
        raise ValueError(f"unknown top-k semantics {semantics!r}")
    ud_ids = {lid for lid, lab in labels.items() if lab == LABEL_UD}
    if not ud_ids:
        return None
    top = set(ranking[:k])
    if semantics == TOPK_ANY:
        return int(bool(ud_ids & top))
    return int(ud_ids <= top)


def _confusion(flags: Mapping[int, bool], labels: Mapping[int, str]) -> tuple[int, int, int, int]:
    if set(flags) != set(labels):
        missing = sorted(set(labels) ^ set(flags))
        raise ValueError(f"flags and labels id sets differ on {missing}")
    tp = fp = tn = fn = 0
    for lid, label in labels.items():
        flagged = bool(flags[lid])
        if label == LABEL_UD:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
            tn += not flagged
    return tp, fp, tn, fn


def _rates(tp: int, fp: int, tn: int, fn: int) -> BinaryMetrics:
    total = tp + fp + tn + fn
    return BinaryMetrics(
        accuracy=(tp + tn) / total if total else None,
        sensitivity=tp / (tp + fn) if (tp + fn) else None,
        specificity=tn / (tn + fp) if (tn + fp) else None,
    )


def binary_metrics(flags, labels, scope: str = "micro") -> BinaryMetrics:
    """Accuracy/sensitivity/specificity of the UD flags.

    flags/labels are parallel sequences (per patient) of {lesion_id: bool}
    and GroundTruth; a single pair is also accepted. micro pools every lesion;
    macro averages per-patient rates, with sensitivity averaged only over
    patients having >= 1 UD and specificity only over patients having >= 1
    common lesion.
    """
    if isinstance(flags, Mapping):
        flags = [flags]
        labels = [labels]
    flags = list(flags)
    labels = [t if isinstance(t, GroundTruth) else GroundTruth("", dict(t)) for t in labels]
    if not flags or len(flags) != len(labels):
        raise ValueError("flags and labels must be equal-length non-empty sequences")

    if scope == "micro":
        tp = fp = tn = fn = 0
        for f, t in zip(flags, labels):
            a, b, c, d = _confusion(f, t.labels)
            tp, fp, tn, fn = tp + a, fp + b, tn + c, fn + d
        if tp + fp + tn + fn == 0:
            raise ValueError("no lesions to evaluate")
        return _rates(tp, fp, tn, fn)
    if scope != "macro":
        raise ValueError(f"unknown scope {scope!r}")

    accs, senss, specs = [], [], []
    for f, t in zip(flags, labels):
        rates = _rates(*_confusion(f, t.labels))
        if rates.accuracy is not None:
            accs.append(rates.accuracy)
        if rates.sensitivity is not None:
            senss.append(rates.sensitivity)
        if rates.specificity is not None:
            specs.append(rates.specificity)
    if not accs:
        raise ValueError("no lesions to evaluate")
    mean = lambda xs: sum(xs) / len(xs) if xs else None
    return BinaryMetrics(accuracy=mean(accs), sensitivity=mean(senss),
                         specificity=mean(specs))


def _report_ranking(report: PatientReport) -> list[int]:
    ranked = [s for s in report.scores if s.rank is not None]
    return [s.lesion_id for s in sorted(ranked, key=lambda s: s.rank)]


def _report_flags(report: PatientReport, labels: Mapping[int, str]) -> dict[int, bool]:
    flags = {s.lesion_id: bool(s.is_ud) for s in report.scores}
    for lid in labels:
        flags.setdefault(lid, False)  # lesions never detected are never flagged
    return flags


def evaluate_corpus(reports: Sequence[PatientReport], truths: Sequence[GroundTruth],
                    topk_semantics: str = TOPK_ANY) -> EvalResult:
    """Corpus metrics for matched report/truth pairs.

    Truth labels must cover every scored lesion; they may additionally list
    lesions the pipeline never scored (these count as unflagged, unranked).
    """
    by_patient = {t.patient_id: t for t in truths}
    report_ids = [r.patient_id for r in reports]
    unmatched = sorted(set(report_ids) ^ set(by_patient))
    if unmatched or len(report_ids) != len(set(report_ids)):
        raise ValueError(f"report/truth patient mismatch: {unmatched}")

    aps, rrs, top3s, top7s = [], [], [], []
    flags_per_patient, truths_per_patient = [], []
    lesions_total = 0
    patients_with_ud = 0
    patients_with_common = 0
    for report in reports:
        truth = by_patient[report.patient_id]
        scored_ids = {s.lesion_id for s in report.scores}
        unlabelled = scored_ids - set(truth.labels)
        if unlabelled:
            raise ValueError(f"patient {report.patient_id}: scored lesions without "
                             f"labels: {sorted(unlabelled)}")
        ranking = _report_ranking(report)
        lesions_total += len(truth.labels)
        if truth.ud_ids:
            patients_with_ud += 1
        if set(truth.labels) - truth.ud_ids:
            patients_with_common += 1
        ap = average_precision(ranking, truth.labels)
        if ap is not None:
            aps.append(ap)
        rr = reciprocal_rank(ranking, truth.labels)
        if rr is not None:
            rrs.append(rr)
        t3 = topk_agreement(ranking, truth.labels, 3, topk_semantics)
        if t3 is not None:
            top3s.append(t3)
        t7 = topk_agreement(ranking, truth.labels, 7, topk_semantics)
        if t7 is not None:
            top7s.append(t7)
        flags_per_patient.append(_report_flags(report, truth.labels))
        truths_per_patient.append(truth)

    mean = lambda xs: sum(xs) / len(xs) if xs else None
    return EvalResult(
        map_=mean(aps),
        mrr=mean(rrs),
        top3_agreement=mean(top3s),
        top7_agreement=mean(top7s),
        micro=binary_metrics(flags_per_patient, truths_per_patient, "micro"),
        macro=binary_metrics(flags_per_patient, truths_per_patient, "macro"),
        counts={
            "patients_total": len(reports),
            "patients_with_ud": patients_with_ud,
            "patients_with_common": patients_with_common,
            "lesions_total": lesions_total,
        },
    )


def match_report_to_truth(report: PatientReport, truth: GroundTruth,
                          truth_boxes: Mapping[int, BoundingBox],
                          iou_floor: float = 0.3) -> GroundTruth:
    """Relabel reference lesions onto the report's own lesion ids by greedy
    box matching (descending IoU, 1:1, floor iou_floor).

    Detections with no reference match are labelled common (spurious).
    Reference lesions with no matched detection are appended under sentinel
    ids (-1 - reference_id) so downstream metrics penalize the miss.
    """
    pairs = []
    for score in report.scores:
        det_box = report.boxes.get(score.lesion_id)
        if det_box is None:
            continue
        for ref_id, ref_box in truth_boxes.items():
            value = iou(det_box, ref_box)
            if value >= iou_floor:
                pairs.append((value, score.lesion_id, ref_id))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    det_to_ref: dict[int, int] = {}
    used_refs: set[int] = set()
    for value, det_id, ref_id in pairs:
        if det_id in det_to_ref or ref_id in used_refs:
            continue
        det_to_ref[det_id] = ref_id
        used_refs.add(ref_id)

    labels: dict[int, str] = {}
    for score in report.scores:
        ref_id = det_to_ref.get(score.lesion_id)
        labels[score.lesion_id] = truth.labels[ref_id] if ref_id is not None else LABEL_COMMON
    for ref_id, label in truth.labels.items():
        if ref_id not in used_refs:
            labels[-1 - ref_id] = label
    return GroundTruth(patient_id=report.patient_id, labels=labels)


# ---------------------------------------------------------------------------
# file ingestion

def read_truth_csv(path: str | Path) -> list[GroundTruth]:
    """Ground-truth CSV with exact header patient_id,lesion_id,label."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "lesion_id", "label"]:
            raise ValueError(f"{path}: expected header patient_id,lesion_id,label, "
                             f"got {header}")
        collected: dict[str, dict[int, str]] = {}
        for row in reader:
            if not row:
                continue
            patient_id, lesion_id, label = row
            collected.setdefault(patient_id, {})[int(lesion_id)] = label
    return [GroundTruth(patient_id=pid, labels=labels)
            for pid, labels in collected.items()]


def read_truth_boxes_csv(path: str | Path) -> dict[str, dict[int, BoundingBox]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["patient_id", "lesion_id", "x_min", "y_min", "x_max", "y_max"]
        if header != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)}, got {header}")
        out: dict[str, dict[int, BoundingBox]] = {}
        for row in reader:
            if not row:
                continue
            pid, lid, x0, y0, x1, y1 = row
            out.setdefault(pid, {})[int(lid)] = BoundingBox(
                float(x0), float(y0), float(x1), float(y1))
    return out


def eval_result_to_json_dict(result: EvalResult) -> dict:
    def rates(m: BinaryMetrics) -> dict:
        return {"accuracy": m.accuracy, "sensitivity": m.sensitivity,
                "specificity": m.specificity}

    return {
        "map": result.map_,
        "mrr": result.mrr,
        "top3_agreement": result.top3_agreement,
        "top7_agreement": result.top7_agreement,
        "micro": rates(result.micro),
        "macro": rates(result.macro),
        "counts": result.counts,
        "format_version": EVAL_FORMAT_VERSION,
    }


def write_eval_result(result: EvalResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(eval_result_to_json_dict(result), indent=2) + "\n")
