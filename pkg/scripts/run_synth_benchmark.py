#!/usr/bin/env python3
"""Synthetic-corpus benchmark: generate patients, analyze each one, and score
the rankings against ground truth.

Trains any missing prerequisite checkpoints (segmenter, base model) into the
work directory on first use, so a bare

    python3 scripts/run_synth_benchmark.py --out /tmp/bench --patients 20

is enough to reproduce the headline numbers.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from udscreen import (SynthConfig, WideFieldImage, analyze_image, corpus_plan,
                      evaluate_corpus, generate_corpus, load_segmenter, load_vae,
                      match_report_to_truth, pretrain_base, read_truth_boxes_csv,
                      read_truth_csv, write_corpus)
from udscreen.config import PipelineConfig
from udscreen.detector import crop_lesion
from udscreen.evalmetrics import eval_result_to_json_dict
from udscreen.pipeline import resolve_detector
from udscreen.scoring import write_report
from udscreen.segmenter import (SegmenterTrainConfig, apply_mask,
                                build_compact_unet, save_segmenter, segment,
                                train_segmenter)
from udscreen.synthgen import generate_patient, generate_training_crops


def ensure_segmenter(work: Path, seed: int):
    path = work / "segmenter.pt"
    if path.exists():
        return load_segmenter(path)
    print("training segmenter (500 positives / 100 negatives, 30 epochs)...")
    pos, neg = generate_training_crops(500, 100, seed=seed)
    model = train_segmenter(build_compact_unet(seed=seed), pos, neg,
                            SegmenterTrainConfig(epochs=30, seed=seed))
    save_segmenter(model, path)
    return model


def ensure_base(work: Path, seed: int, segmenter_model, cfg: PipelineConfig):
    path = work / ("vae_base.pt" if segmenter_model is not None
                   else "vae_base_raw.pt")
    if path.exists():
        return load_vae(path)
    print("pretraining base model (30 patients)...")
    plan = corpus_plan(30, base_seed=seed + 9000, template=SynthConfig(seed=0),
                       n_common_range=(10, 40), n_outlier_range=(0, 0))
    corpus = {}
    for synth_cfg in plan:
        image, truth = generate_patient(synth_cfg)
        lesions = []
        for i, box in enumerate(truth.boxes):
            crop = crop_lesion(image, box, lesion_id=i)
            if segmenter_model is not None:
                lesions.append(apply_mask(crop, segment(segmenter_model, crop),
                                          cfg.segmenter.masking_policy))
            else:
                lesions.append(crop)
        corpus[truth.patient_id] = lesions
    return pretrain_base(corpus, epochs=cfg.vae.pretrain_epochs, seed=seed,
                         latent_dim=cfg.vae.latent_dim, beta=cfg.vae.beta,
                         checkpoint_path=path)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--patients", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=("scratch", "finetune", "embed_only"),
                    default="finetune")
    ap.add_argument("--no-mask", action="store_true",
                    help="skip segmentation masking of crops")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = PipelineConfig()
    cfg = dataclasses.replace(
        cfg, seed=args.seed,
        segmenter=dataclasses.replace(cfg.segmenter, enabled=not args.no_mask),
        pipeline=dataclasses.replace(cfg.pipeline, mode=args.mode))

    seg = None if args.no_mask else ensure_segmenter(args.out, args.seed)
    base = None
    if args.mode != "scratch":
        base = ensure_base(args.out, args.seed, seg, cfg)

    corpus = generate_corpus(args.patients, base_seed=args.seed,
                             template=SynthConfig(seed=0), ud_free_fraction=0.0,
                             n_common_range=(30, 80), n_outlier_range=(1, 2))
    corpus_dir = args.out / "corpus"
    write_corpus(corpus_dir, corpus)

    detector = resolve_detector(cfg)
    reports = []
    for image, truth in corpus:
        t0 = time.time()
        result = analyze_image(image, cfg, detector=detector,
                               segmenter_model=seg, vae_base=base)
        reports.append(result.report)
        report_dir = args.out / "reports" / truth.patient_id
        report_dir.mkdir(parents=True, exist_ok=True)
        write_report(result.report, report_dir / "report.json")
        n_ud = sum(1 for v in truth.labels.values() if v == "ud")
        print(f"{truth.patient_id}: {len(result.report.scores)} lesions "
              f"({n_ud} true UD) status={result.status} {time.time()-t0:.0f}s")

    truths = {t.patient_id: t for t in read_truth_csv(corpus_dir / "truth.csv")}
    boxes = read_truth_boxes_csv(corpus_dir / "truth_boxes.csv")
    aligned = [match_report_to_truth(r, truths[r.patient_id], boxes[r.patient_id])
               for r in reports]
    result = evaluate_corpus(reports, aligned)
    payload = eval_result_to_json_dict(result)
    (args.out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
