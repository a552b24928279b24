#!/usr/bin/env python3
"""Masking ablation: does suppressing the skin background around each lesion
crop improve outlier ranking?

Runs the benchmark twice over the same synthetic corpus — once with
segmentation masking on, once with raw crops — using a base model pretrained
under the matching condition, and compares top-3 agreement.
"""

import argparse
import subprocess
import json
import sys
from pathlib import Path


def run_arm(out: Path, patients: int, seed: int, masked: bool) -> dict:
    arm_dir = out / ("masked" if masked else "raw")
    cmd = [sys.executable, str(Path(__file__).parent / "run_synth_benchmark.py"),
           "--out", str(arm_dir), "--patients", str(patients),
           "--seed", str(seed), "--mode", "finetune"]
    if not masked:
        cmd.append("--no-mask")
    subprocess.run(cmd, check=True)
    return json.loads((arm_dir / "eval.json").read_text())


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--patients", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    masked = run_arm(args.out, args.patients, args.seed, masked=True)
    raw = run_arm(args.out, args.patients, args.seed, masked=False)

    print(f"\n{'metric':<16}{'masked':>10}{'raw':>10}")
    for key in ("map", "mrr", "top3_agreement", "top7_agreement"):
        m, r = masked.get(key), raw.get(key)
        fm = "n/a" if m is None else f"{m:.4f}"
        fr = "n/a" if r is None else f"{r:.4f}"
        print(f"{key:<16}{fm:>10}{fr:>10}")
    delta = (masked.get("top3_agreement") or 0) - (raw.get("top3_agreement") or 0)
    print(f"\ntop-3 delta (masked - raw): {delta:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
