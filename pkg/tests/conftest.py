"""Shared fixtures.

The expensive artifacts (trained segmenter, pretrained bases, the 20-patient
evaluation corpus with its detections) are session-scoped and built lazily,
so running a single module only pays for what it uses.
"""

import pytest

from udscreen.config import PipelineConfig
from udscreen.detector import crop_lesion
from udscreen.segmenter import (SegmenterTrainConfig, apply_mask,
                                build_compact_unet, segment, train_segmenter)
from udscreen.synthgen import (SynthConfig, corpus_plan, generate_corpus,
                               generate_patient, generate_training_crops)
from udscreen.vae import pretrain_base

# ---------------------------------------------------------------------------
# acceptance-criteria reporting: one visible pass/fail line per criterion

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# heavy artifacts

@pytest.fixture(scope="session")
def trained_segmenter():
    positives, negatives = generate_training_crops(500, 100, seed=0)
    model = build_compact_unet(seed=0)
    return train_segmenter(model, positives, negatives,
                           SegmenterTrainConfig(epochs=30, seed=0))


def _pretrain_corpus(segmenter_model):
    plan = corpus_plan(30, base_seed=9000, template=SynthConfig(seed=0),
                       n_common_range=(10, 40), n_outlier_range=(0, 0))
    corpus = {}
    for cfg in plan:
        image, truth = generate_patient(cfg)
        lesions = [crop_lesion(image, box, lesion_id=i)
                   for i, box in enumerate(truth.boxes)]
        if segmenter_model is not None:
            lesions = [apply_mask(crop, segment(segmenter_model, crop))
                       for crop in lesions]
        corpus[truth.patient_id] = lesions
    return corpus


@pytest.fixture(scope="session")
def vae_base_masked(trained_segmenter):
    return pretrain_base(_pretrain_corpus(trained_segmenter), epochs=60, seed=0)


@pytest.fixture(scope="session")
def vae_base_raw():
    return pretrain_base(_pretrain_corpus(None), epochs=60, seed=0)


# ---------------------------------------------------------------------------
# shared evaluation corpus: 20 patients with fixed seeds

EVAL_CORPUS_PATIENTS = 20


@pytest.fixture(scope="session")
def eval_corpus():
    """(image, truth) pairs; every patient carries 1-2 planted outliers."""
    return generate_corpus(EVAL_CORPUS_PATIENTS, base_seed=0,
                           template=SynthConfig(seed=0), ud_free_fraction=0.0,
                           n_common_range=(30, 80), n_outlier_range=(1, 2))


@pytest.fixture(scope="session")
def pipeline_config():
    return PipelineConfig()
