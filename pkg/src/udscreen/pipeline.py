"""End-to-end per-patient analysis: tiling -> detection -> NMS -> crops ->
segmentation masks -> (scratch | finetune | embed-only) outlier model ->
distances -> threshold -> ranked report, plus the annotated image and a
machine-readable run manifest.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import (MODE_EMBED_ONLY, MODE_FINETUNE, MODE_SCRATCH, PipelineConfig,
                     config_hash, config_to_canonical_dict)
from .detector import DetectorModel, LesionCrop, classical_detector, crop_lesion, \
    detect_tile, load_detector
from .scoring import (DistanceVector, LesionScore, PatientReport, build_report,
                      embedding_distances, reconstruction_distances)
from .segmenter import MaskedLesion, SegmenterModel, apply_mask, load_segmenter, segment
from .tiling import BoundingBox, Tile, WideFieldImage, nms, tile_image, to_full_coords
from .vae import VaeModel, embed_batch, finetune, load_vae, recon_scores, train_scratch

STATUS_OK = "ok"
STATUS_NO_LESIONS = "no_lesions"
STATUS_INSUFFICIENT_COHORT = "insufficient_cohort"


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # copy of the input with rectangles on flagged lesions
    legend: dict  # threshold / mean / std, exactly as reported
    rectangles: dict[int, BoundingBox] = field(default_factory=dict)


@dataclass
class AnalysisResult:
    report: PatientReport
    status: str
    annotated: AnnotatedImage
    boxes: list[BoundingBox] = field(default_factory=list)
    crops: list[LesionCrop] = field(default_factory=list)
    model_inputs: list = field(default_factory=list)  # MaskedLesion or LesionCrop
    warnings: list[str] = field(default_factory=list)


def _keep_interior_box(box: BoundingBox, tile: Tile, image_w: int, image_h: int,
                       margin: float = 1.0) -> bool:
    """Drop boxes touching a tile edge that is interior to the image: with
    overlapping tiles, any lesion smaller than the stride lies fully inside
    some tile, so edge-touchers are partial duplicates of a box found there."""
    th, tw = tile.pixels.shape[:2]
    if box.x_min <= margin and tile.origin_x > 0:
        return False
    if box.y_min <= margin and tile.origin_y > 0:
        return False
    if box.x_max >= tw - margin and tile.origin_x + tw < image_w:
        return False
    if box.y_max >= th - margin and tile.origin_y + th < image_h:
        return False
    return True


def detect_lesions(image: WideFieldImage, config: PipelineConfig,
                   detector: DetectorModel) -> list[BoundingBox]:
    """Tiled detection with cross-tile NMS in full-image coordinates."""
    collected: list[BoundingBox] = []
    for tile in tile_image(image, config.tile_size, config.overlap_fraction):
        for box in detect_tile(detector, tile, nms_iou=config.nms_iou):
            if not _keep_interior_box(box, tile, image.width, image.height):
                continue
            mapped = to_full_coords(tile, box, image.width, image.height)
            if mapped.x_max - mapped.x_min < 2.0 or mapped.y_max - mapped.y_min < 2.0:
                # a box wholly inside the reflection padding of an
                # undersized image clips to a sliver on the boundary
                continue
            collected.append(mapped)
    return nms(collected, config.nms_iou)


def prepare_model_inputs(image: WideFieldImage, boxes: Sequence[BoundingBox],
                         config: PipelineConfig,
                         segmenter_model: SegmenterModel | None) -> tuple[list, list]:
    """(crops, model inputs): 64x64 crops and, when segmentation is enabled,
    their background-suppressed versions."""
    crops = [crop_lesion(image, box, lesion_id=i) for i, box in enumerate(boxes)]
    if not config.segmenter.enabled:
        return crops, list(crops)
    if segmenter_model is None:
        raise ValueError("segmentation enabled but no segmenter model provided")
    inputs: list[MaskedLesion] = []
    for crop in crops:
        mask = segment(segmenter_model, crop)
        inputs.append(apply_mask(crop, mask, config.segmenter.masking_policy))
    return crops, inputs


def _empty_report(patient_id: str, mode: str) -> PatientReport:
    return PatientReport(patient_id=patient_id, mode=mode, threshold=None,
                         mean_distance=None, std_distance=None, scores=[], boxes={})


def _annotate(image: WideFieldImage, report: PatientReport,
              color: tuple[int, int, int]) -> AnnotatedImage:
    from PIL import Image, ImageDraw

    canvas = Image.fromarray(image.pixels.copy())
    draw = ImageDraw.Draw(canvas)
    rectangles: dict[int, BoundingBox] = {}
    for score in report.scores:
        if not score.is_ud:
            continue
        box = report.boxes[score.lesion_id]
        draw.rectangle([box.x_min, box.y_min, box.x_max, box.y_max],
                       outline=tuple(int(c) for c in color), width=2)
        rectangles[score.lesion_id] = box
    legend = {"threshold": report.threshold, "mean": report.mean_distance,
              "std": report.std_distance, "flagged": len(rectangles),
              "lesions": len(report.scores)}

    def fmt(v):
        return "n/a" if v is None else f"{v:.2f}"

    text = (f"threshold={fmt(report.threshold)}  mean={fmt(report.mean_distance)}  "
            f"std={fmt(report.std_distance)}  flagged={len(rectangles)}/{len(report.scores)}")
    pad = 4
    text_box = draw.textbbox((pad, pad), text)
    draw.rectangle([0, 0, text_box[2] + pad, text_box[3] + pad], fill=(255, 255, 255))
    draw.text((pad, pad), text, fill=(0, 0, 0))
    return AnnotatedImage(pixels=np.asarray(canvas), legend=legend, rectangles=rectangles)


def analyze_image(image: WideFieldImage, config: PipelineConfig,
                  detector: DetectorModel | None = None,
                  segmenter_model: SegmenterModel | None = None,
                  vae_base: VaeModel | None = None) -> AnalysisResult:
    """Run the full pipeline on one wide-field image.

    Degenerate inputs stay successful: zero detections produce an empty
    report (status no_lesions); a single detection produces a report whose
    lone lesion is unscored (status insufficient_cohort).
    """
    mode = config.pipeline.mode
    warnings: list[str] = []
    if detector is None:
        detector = resolve_detector(config)

    boxes = detect_lesions(image, config, detector)
    if not boxes:
        report = _empty_report(image.patient_id, mode)
        warnings.append("no lesions detected; empty report")
        return AnalysisResult(report=report, status=STATUS_NO_LESIONS,
                              annotated=_annotate(image, report,
                                                  config.pipeline.annotation_color),
                              warnings=warnings)

    if config.segmenter.enabled and segmenter_model is None:
        segmenter_model = resolve_segmenter(config)
    crops, model_inputs = prepare_model_inputs(image, boxes, config, segmenter_model)
    box_map = {i: box for i, box in enumerate(boxes)}

    if len(boxes) == 1:
        report = PatientReport(
            patient_id=image.patient_id, mode=mode, threshold=None,
            mean_distance=None, std_distance=None,
            scores=[LesionScore(lesion_id=0, distance=None, rank=None, is_ud=None)],
            boxes=box_map)
        warnings.append("single lesion: no cohort to compare against; scoring skipped")
        return AnalysisResult(report=report, status=STATUS_INSUFFICIENT_COHORT,
                              annotated=_annotate(image, report,
                                                  config.pipeline.annotation_color),
                              boxes=boxes, crops=crops, model_inputs=model_inputs,
                              warnings=warnings)

    if mode == MODE_SCRATCH:
        model = train_scratch(model_inputs, epochs=config.vae.scratch_epochs,
                              seed=config.seed, latent_dim=config.vae.latent_dim,
                              beta=config.vae.beta, lr=config.vae.lr,
                              batch_size=config.vae.batch_size)
    else:
        if vae_base is None:
            vae_base = resolve_vae_base(config)
        if mode == MODE_FINETUNE:
            model = finetune(vae_base, model_inputs, epochs=config.vae.finetune_epochs,
                             seed=config.seed, lr=config.vae.lr,
                             batch_size=config.vae.batch_size)
        else:  # embed_only
            model = vae_base

    distances = _score(model, model_inputs, config, image.patient_id)
    report = build_report(image.patient_id, box_map, distances, mode,
                          std_mode=config.scoring.std_mode)
    return AnalysisResult(report=report, status=STATUS_OK,
                          annotated=_annotate(image, report,
                                              config.pipeline.annotation_color),
                          boxes=boxes, crops=crops, model_inputs=model_inputs,
                          warnings=warnings)


def _score(model: VaeModel, model_inputs: Sequence, config: PipelineConfig,
           patient_id: str) -> DistanceVector:
    if config.scoring.source == "embedding_l2":
        return embedding_distances(embed_batch(model, model_inputs), patient_id)
    scores = recon_scores(model, model_inputs)
    ids = [getattr(lesion, "lesion_id", i) for i, lesion in enumerate(model_inputs)]
    return reconstruction_distances(ids, scores, patient_id)


# ---------------------------------------------------------------------------
# model resolution from config

def resolve_detector(config: PipelineConfig) -> DetectorModel:
    if config.detector.kind == "classical":
        return classical_detector(
            confidence_threshold=config.detector.confidence_threshold,
            min_diameter_px=config.detector.min_diameter_px,
            min_contrast=config.detector.min_contrast)
    path = config.detector_checkpoint()
    if not path.exists():
        raise FileNotFoundError(
            f"neural detector checkpoint missing: {path}; train one with "
            f"a labelled tile set or switch detector.kind to classical")
    return load_detector(path)


def resolve_segmenter(config: PipelineConfig) -> SegmenterModel:
    path = config.segmenter_checkpoint()
    if not path.exists():
        raise FileNotFoundError(
            f"segmenter checkpoint missing: {path}; run the segment-train "
            f"subcommand first or disable segmentation (segmenter.enabled: false)")
    return load_segmenter(path)


def resolve_vae_base(config: PipelineConfig) -> VaeModel:
    path = config.vae_base_checkpoint()
    if not path.exists():
        raise FileNotFoundError(
            f"base model checkpoint missing: {path}; run the vae-pretrain "
            f"subcommand first or use pipeline.mode: scratch")
    return load_vae(path)


# ---------------------------------------------------------------------------
# run manifests

def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str | Path, command: str, arguments: Sequence[str],
                   config: PipelineConfig, inputs: Sequence[str | Path] = (),
                   outputs: Sequence[str] = (), status: str = STATUS_OK,
                   warnings: Sequence[str] = ()) -> Path:
    """Deterministic run manifest: inputs (hashed), config + hash, versions."""
    import PIL
    import scipy
    import torch

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": list(arguments),
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs},
        "config_hash": config_hash(config),
        "config": config_to_canonical_dict(config),
        "versions": {
            "udscreen": __version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
            "pillow": PIL.__version__,
        },
        "status": status,
        "outputs": list(outputs),
        "warnings": list(warnings),
        "format_version": 1,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
