"""Command-line interface.

Subcommands: synth, detect, segment-train, vae-pretrain, analyze, eval.
Every subcommand accepts --config/--seed/--out, writes its outputs plus a
deterministic manifest.json into --out, and exits 0 on success, 1 on a
runtime failure (diagnostic on stderr), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, config_from_dict, load_config
from .detector import crop_lesion
from .evalmetrics import (eval_result_to_json_dict, evaluate_corpus,
                          match_report_to_truth, read_truth_boxes_csv, read_truth_csv)
from .pipeline import (STATUS_OK, analyze_image, resolve_segmenter, write_manifest)
from .scoring import read_report, report_to_json_bytes
from .segmenter import (SegmenterTrainConfig, apply_mask, build_compact_unet,
                        save_segmenter, segment, select_threshold, train_segmenter)
from .synthgen import (SynthConfig, corpus_plan, generate_corpus,
                       generate_patient, generate_training_crops, write_corpus)
from .tiling import WideFieldImage
from .vae import pretrain_base


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None,
                     help="YAML/JSON pipeline config (defaults used when omitted)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--out", type=Path, required=True, help="output directory")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synth

def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    n_common_range = tuple(args.n_common_range)
    n_outlier_range = tuple(args.n_outlier_range)
    if args.n_common is not None:
        n_common_range = (args.n_common, args.n_common)
    if args.n_outliers is not None:
        n_outlier_range = (args.n_outliers, args.n_outliers)
    template = SynthConfig(seed=0, image_size=tuple(args.image_size))
    corpus = generate_corpus(args.patients, base_seed=cfg.seed, template=template,
                             ud_free_fraction=args.ud_free_fraction,
                             n_common_range=n_common_range,
                             n_outlier_range=n_outlier_range)
    paths = write_corpus(args.out, corpus)
    outputs = sorted(Path(p).name for p in paths.values())
    outputs += [f"{truth.patient_id}.png" for _, truth in corpus]
    write_manifest(args.out, "synth", _raw_args(args), cfg, outputs=outputs)
    print(f"wrote {args.patients} patients to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# detect

def _cmd_detect(args: argparse.Namespace) -> int:
    from .pipeline import detect_lesions, resolve_detector

    cfg = _load_config(args)
    image = WideFieldImage.from_file(args.image, patient_id=args.patient_id)
    detector = resolve_detector(cfg)
    boxes = detect_lesions(image, cfg, detector)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "patient_id": image.patient_id,
        "detections": [
            {"lesion_id": i,
             "box": [box.x_min, box.y_min, box.x_max, box.y_max],
             "confidence": box.confidence}
            for i, box in enumerate(boxes)
        ],
        "format_version": 1,
    }
    _write_json(args.out / "detections.json", payload)
    write_manifest(args.out, "detect", _raw_args(args), cfg, inputs=[args.image],
                   outputs=["detections.json"])
    print(f"{len(boxes)} detections -> {args.out / 'detections.json'}")
    return 0


# ---------------------------------------------------------------------------
# segment-train

def _load_crop_mask_dir(
        root: Path) -> tuple[list[np.ndarray], list[np.ndarray], list[Path]]:
    """Read paired crops/<name>.png + masks/<name>.png from a directory."""
    from PIL import Image

    crops_dir, masks_dir = root / "crops", root / "masks"
    if not crops_dir.is_dir() or not masks_dir.is_dir():
        raise FileNotFoundError(
            f"--data directory must contain crops/ and masks/: {root}")
    crops, masks, paths = [], [], []
    for crop_path in sorted(crops_dir.glob("*.png")):
        mask_path = masks_dir / crop_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask for crop {crop_path.name}")
        with Image.open(crop_path) as im:
            crops.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        with Image.open(mask_path) as im:
            masks.append(np.asarray(im.convert("L")) > 127)
        paths += [crop_path, mask_path]
    if not crops:
        raise ValueError(f"no crops found under {crops_dir}")
    return crops, masks, paths


def _cmd_segment_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    positives, negatives = generate_training_crops(
        args.n_positives, args.n_negatives, seed=cfg.seed)
    data_paths: list[Path] = []
    if args.data is not None:
        extra_crops, extra_masks, data_paths = _load_crop_mask_dir(args.data)
        for crop, mask in zip(extra_crops, extra_masks):
            if mask.any():
                positives.append((crop, mask))
            else:
                negatives.append(crop)
    model = build_compact_unet(base_channels=cfg.segmenter.base_channels,
                               seed=cfg.seed)
    train_cfg = SegmenterTrainConfig(epochs=args.epochs, seed=cfg.seed)
    model = train_segmenter(model, positives, negatives, train_cfg)

    val_pos, val_neg = generate_training_crops(100, 20, seed=cfg.seed + 1)
    size = val_pos[0][0].shape[0]
    val = list(val_pos) + [(c, np.zeros((size, size), dtype=bool)) for c in val_neg]
    threshold = select_threshold(model, val)
    model.binary_threshold = threshold

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "segmenter.pt"
    save_segmenter(model, path)
    write_manifest(args.out, "segment-train", _raw_args(args), cfg,
                   inputs=data_paths,
                   outputs=["segmenter.pt", "segmenter.pt.json"])
    summary = model.training_summary or {}
    print(f"trained segmenter ({model.trainable_param_count} params, "
          f"threshold={threshold}) -> {path}")
    if "final_loss" in summary:
        print(f"loss {summary['first_loss']:.4f} -> {summary['final_loss']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# vae-pretrain

def _cmd_vae_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    segmenter_model = resolve_segmenter(cfg) if cfg.segmenter.enabled else None

    template = SynthConfig(seed=0)
    plan = corpus_plan(args.patients, base_seed=cfg.seed, template=template,
                       n_common_range=(10, 40), n_outlier_range=(0, 0))
    corpus: dict[str, list] = {}
    for synth_cfg in plan:
        image, truth = generate_patient(synth_cfg)
        lesions = []
        for i, box in enumerate(truth.boxes):
            crop = crop_lesion(image, box, lesion_id=i)
            if segmenter_model is not None:
                mask = segment(segmenter_model, crop)
                lesions.append(apply_mask(crop, mask, cfg.segmenter.masking_policy))
            else:
                lesions.append(crop)
        corpus[truth.patient_id] = lesions

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "vae_base.pt"
    epochs = args.epochs if args.epochs is not None else cfg.vae.pretrain_epochs
    pretrain_base(corpus, epochs=epochs, seed=cfg.seed,
                  latent_dim=cfg.vae.latent_dim, beta=cfg.vae.beta,
                  lr=cfg.vae.lr, batch_size=cfg.vae.batch_size,
                  checkpoint_path=path)
    write_manifest(args.out, "vae-pretrain", _raw_args(args), cfg,
                   outputs=["vae_base.pt", "vae_base.pt.json"])
    print(f"pretrained base model on {args.patients} patients -> {path}")
    return 0


# ---------------------------------------------------------------------------
# analyze

def _cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    image = WideFieldImage.from_file(args.image, patient_id=args.patient_id)
    result = analyze_image(image, cfg)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_bytes(report_to_json_bytes(result.report))
    from PIL import Image

    Image.fromarray(result.annotated.pixels).save(args.out / "annotated.png")
    write_manifest(args.out, "analyze", _raw_args(args), cfg, inputs=[args.image],
                   outputs=["report.json", "annotated.png"], status=result.status,
                   warnings=result.warnings)
    for line in result.warnings:
        print(f"warning: {line}", file=sys.stderr)
    flagged = sum(1 for s in result.report.scores if s.is_ud)
    print(f"{len(result.report.scores)} lesions, {flagged} flagged "
          f"({result.status}) -> {args.out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _find_reports(root: Path) -> list[Path]:
    paths = sorted(root.rglob("report.json")) + sorted(root.glob("*.report.json"))
    if not paths:
        raise FileNotFoundError(f"no report.json files under {root}")
    return paths


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    reports = [read_report(p) for p in _find_reports(args.reports)]
    truths = read_truth_csv(args.truth)
    by_patient = {t.patient_id: t for t in truths}

    boxes_path = args.boxes
    if boxes_path is None:
        candidate = args.truth.parent / "truth_boxes.csv"
        boxes_path = candidate if candidate.exists() else None
    if boxes_path is not None:
        mismatch = sorted(set(by_patient) ^ {r.patient_id for r in reports})
        if mismatch:
            raise ValueError(f"report/truth patient mismatch: {mismatch}")
        truth_boxes = read_truth_boxes_csv(boxes_path)
        truths = [match_report_to_truth(report, by_patient[report.patient_id],
                                        truth_boxes[report.patient_id])
                  for report in reports]

    result = evaluate_corpus(reports, truths,
                             topk_semantics=cfg.pipeline.topk_semantics)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = eval_result_to_json_dict(result)
    _write_json(args.out / "eval.json", payload)
    inputs = [args.truth] + ([boxes_path] if boxes_path else [])
    write_manifest(args.out, "eval", _raw_args(args), cfg, inputs=inputs,
                   outputs=["eval.json"])

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(f"patients={result.counts['patients_total']} "
          f"map={fmt(result.map_)} mrr={fmt(result.mrr)} "
          f"top3={fmt(result.top3_agreement)} top7={fmt(result.top7_agreement)}")
    print(f"micro: sens={fmt(result.micro.sensitivity)} "
          f"spec={fmt(result.micro.specificity)} acc={fmt(result.micro.accuracy)}")
    return 0


# ---------------------------------------------------------------------------

def _raw_args(args: argparse.Namespace) -> list[str]:
    return list(getattr(args, "_raw_argv", []))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udscreen",
        description="self-trained ugly-duckling screening for wide-field skin images")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic labelled corpus")
    _add_common(p)
    p.add_argument("--patients", type=int, default=1)
    p.add_argument("--n-common", type=int, default=None,
                   help="fix the common-lesion count for every patient")
    p.add_argument("--n-outliers", type=int, default=None,
                   help="fix the outlier count for every patient")
    p.add_argument("--n-common-range", type=int, nargs=2, default=(10, 120),
                   metavar=("LO", "HI"))
    p.add_argument("--n-outlier-range", type=int, nargs=2, default=(1, 2),
                   metavar=("LO", "HI"))
    p.add_argument("--ud-free-fraction", type=float, default=22.0 / 75.0)
    p.add_argument("--image-size", type=int, nargs=2, default=(1640, 1116),
                   metavar=("W", "H"))
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("detect", help="run tiled lesion detection on one image")
    _add_common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--patient-id", type=str, default=None)
    p.set_defaults(func=_cmd_detect)

    p = subs.add_parser("segment-train", help="train the lesion segmenter")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="directory with crops/ and masks/ PNG pairs to add")
    p.add_argument("--n-positives", type=int, default=500)
    p.add_argument("--n-negatives", type=int, default=100)
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(func=_cmd_segment_train)

    p = subs.add_parser("vae-pretrain",
                        help="pretrain the shared base model on a synthetic cohort")
    _add_common(p)
    p.add_argument("--patients", type=int, default=30)
    p.add_argument("--epochs", type=int, default=None,
                   help="override vae.pretrain_epochs")
    p.set_defaults(func=_cmd_vae_pretrain)

    p = subs.add_parser("analyze", help="full pipeline on one wide-field image")
    _add_common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--patient-id", type=str, default=None)
    p.set_defaults(func=_cmd_analyze)

    p = subs.add_parser("eval", help="score ranked reports against ground truth")
    _add_common(p)
    p.add_argument("--reports", type=Path, required=True,
                   help="directory containing report.json files")
    p.add_argument("--truth", type=Path, required=True, help="truth.csv")
    p.add_argument("--boxes", type=Path, default=None,
                   help="truth_boxes.csv (auto-detected next to truth.csv)")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    args._raw_argv = list(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failure -> exit 1 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
