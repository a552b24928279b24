"""Distances, ranks, threshold, and UD flags for one patient.

The threshold rule: threshold = mean(distances) + min(mean, std). A lesion is
flagged as the patient's ugly duckling when its distance is strictly above
the threshold. Works identically for embedding-L2 distances and for
reconstruction-loss scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tiling import BoundingBox
from .vae import LatentEmbedding

REPORT_FORMAT_VERSION = 1

SOURCE_EMBEDDING = "embedding_l2"
SOURCE_RECONSTRUCTION = "reconstruction"

STD_POPULATION = "population"
STD_SAMPLE = "sample"


@dataclass
class DistanceVector:
    patient_id: str
    entries: list[tuple[int, float]]  # (lesion_id, distance)
    source: str = SOURCE_EMBEDDING

    def __post_init__(self) -> None:
        if self.source not in (SOURCE_EMBEDDING, SOURCE_RECONSTRUCTION):
            raise ValueError(f"unknown distance source {self.source!r}")
        seen = set()
        for lesion_id, distance in self.entries:
            if lesion_id in seen:
                raise ValueError(f"duplicate lesion_id {lesion_id}")
            seen.add(lesion_id)
            if not np.isfinite(distance) or distance < 0:
                raise ValueError(f"bad distance {distance} for lesion {lesion_id}")

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, d in self.entries], dtype=np.float64)


@dataclass
class LesionScore:
    lesion_id: int
    distance: float
    rank: int
    is_ud: bool = False


@dataclass
class PatientReport:
    patient_id: str
    mode: str
    threshold: float | None
    mean_distance: float | None
    std_distance: float | None
    scores: list[LesionScore]
    boxes: dict[int, BoundingBox] = field(default_factory=dict)
    format_version: int = REPORT_FORMAT_VERSION


def embedding_distances(embeddings: Sequence[LatentEmbedding], patient_id: str = "",
                        source: str = SOURCE_EMBEDDING) -> DistanceVector:
    """L2 distance of every embedding to the arithmetic-mean embedding."""
    if len(embeddings) < 2:
        raise ValueError("need >= 2 embeddings to compare against a cohort")
    lengths = {len(e.mu) for e in embeddings}
    if len(lengths) != 1:
        raise ValueError(f"embedding lengths differ: {sorted(lengths)}")
    mus = np.stack([np.asarray(e.mu, dtype=np.float64) for e in embeddings])
    centroid = mus.mean(axis=0)
    dists = np.linalg.norm(mus - centroid, axis=1)
    entries = [(e.lesion_id, float(d)) for e, d in zip(embeddings, dists)]
    return DistanceVector(patient_id=patient_id, entries=entries, source=source)


def reconstruction_distances(lesion_ids: Sequence[int], scores: Sequence[float],
                             patient_id: str = "") -> DistanceVector:
    """Wrap per-lesion reconstruction losses as a DistanceVector."""
    if len(lesion_ids) != len(scores):
        raise ValueError("lesion_ids and scores must have equal length")
    return DistanceVector(patient_id=patient_id,
                          entries=[(int(i), float(s)) for i, s in zip(lesion_ids, scores)],
                          source=SOURCE_RECONSTRUCTION)


def distance_stats(distances: DistanceVector, std_mode: str = STD_POPULATION
                   ) -> tuple[float, float]:
    values = distances.distances
    if values.size == 0:
        raise ValueError("empty distance vector")
    mean = float(values.mean())
    if std_mode == STD_POPULATION:
        std = float(values.std(ddof=0))
    elif std_mode == STD_SAMPLE:
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    else:
        raise ValueError(f"unknown std_mode {std_mode!r}")
    return mean, std


def compute_threshold(distances: DistanceVector, std_mode: str = STD_POPULATION) -> float:
    """threshold = mean + min(mean, std) over all entries."""
    mean, std = distance_stats(distances, std_mode)
    return mean + min(mean, std)


def rank_lesions(distances: DistanceVector) -> list[LesionScore]:
    """Ranks only (is_ud left False): rank 1 = largest distance; ties broken
    by ascending lesion_id."""
    if not distances.entries:
        raise ValueError("empty distance vector")
    ordered = sorted(distances.entries, key=lambda e: (-e[1], e[0]))
    return [LesionScore(lesion_id=lid, distance=dist, rank=r + 1)
            for r, (lid, dist) in enumerate(ordered)]


def classify(distances: DistanceVector, threshold: float) -> dict[int, bool]:
    """is_ud = distance strictly above threshold."""
    return {lid: dist > threshold for lid, dist in distances.entries}


def build_report(patient_id: str, boxes: Mapping[int, BoundingBox],
                 distances: DistanceVector, mode: str,
                 std_mode: str = STD_POPULATION) -> PatientReport:
    ids_boxes = set(boxes)
    ids_dist = {lid for lid, _ in distances.entries}
    if ids_boxes != ids_dist:
        raise ValueError(f"lesion_id mismatch: boxes {sorted(ids_boxes)} vs "
                         f"distances {sorted(ids_dist)}")
    mean, std = distance_stats(distances, std_mode)
    threshold = mean + min(mean, std)
    flags = classify(distances, threshold)
    scores = [LesionScore(s.lesion_id, s.distance, s.rank, flags[s.lesion_id])
              for s in rank_lesions(distances)]
    return PatientReport(patient_id=patient_id, mode=mode, threshold=threshold,
                         mean_distance=mean, std_distance=std, scores=scores,
                         boxes=dict(boxes))


def report_to_json_dict(report: PatientReport) -> dict:
    """Fixed field order; floats keep full round-trip precision via repr."""
    lesions = []
    for s in report.scores:
        box = report.boxes.get(s.lesion_id)
        lesions.append({
            "lesion_id": s.lesion_id,
            "box": None if box is None else [box.x_min, box.y_min, box.x_max, box.y_max],
            "distance": s.distance,
            "rank": s.rank,
            "is_ud": s.is_ud,
        })
    return {
        "patient_id": report.patient_id,
        "mode": report.mode,
        "threshold": report.threshold,
        "mean_distance": report.mean_distance,
        "std_distance": report.std_distance,
        "lesions": lesions,
        "format_version": report.format_version,
    }


def report_to_json_bytes(report: PatientReport) -> bytes:
    return (json.dumps(report_to_json_dict(report), indent=2) + "\n").encode()


def write_report(report: PatientReport, path: str | Path) -> None:
    Path(path).write_bytes(report_to_json_bytes(report))


def report_from_json_dict(payload: Mapping) -> PatientReport:
    scores = []
    boxes = {}
    for entry in payload["lesions"]:
        lid = int(entry["lesion_id"])
        scores.append(LesionScore(
            lesion_id=lid,
            distance=entry["distance"],
            rank=entry["rank"],
            is_ud=entry["is_ud"],
        ))
        if entry.get("box") is not None:
            x0, y0, x1, y1 = entry["box"]
            boxes[lid] = BoundingBox(x0, y0, x1, y1)
    return PatientReport(
        patient_id=payload["patient_id"],
        mode=payload["mode"],
        threshold=payload["threshold"],
        mean_distance=payload["mean_distance"],
        std_distance=payload["std_distance"],
        scores=scores,
        boxes=boxes,
        format_version=payload.get("format_version", REPORT_FORMAT_VERSION),
    )


def read_report(path: str | Path) -> PatientReport:
    return report_from_json_dict(json.loads(Path(path).read_text()))
