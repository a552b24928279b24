import dataclasses

import numpy as np
import pytest

from udscreen.evalmetrics import read_truth_boxes_csv, read_truth_csv
from udscreen.synthgen import (LESION_BASE, SKIN_BASE, OutlierShift, SynthConfig,
                               corpus_plan, generate_corpus, generate_patient,
                               generate_training_crops, parameter_separation,
                               write_corpus)
from udscreen.tiling import iou


SMALL = SynthConfig(seed=11, image_size=(640, 480), n_common=12, n_outliers=1)


@pytest.fixture(scope="module")
def small_patient():
    return generate_patient(SMALL)


class TestGeneratePatient:
    def test_deterministic(self, small_patient):
        image, truth = small_patient
        image2, truth2 = generate_patient(SMALL)
        np.testing.assert_array_equal(image.pixels, image2.pixels)
        assert truth.labels == truth2.labels
        assert [tuple(b.as_tuple()) if hasattr(b, "as_tuple") else
                (b.x_min, b.y_min, b.x_max, b.y_max) for b in truth.boxes] == \
               [(b.x_min, b.y_min, b.x_max, b.y_max) for b in truth2.boxes]

    def test_seed_changes_image(self, small_patient):
        image, _ = small_patient
        other, _ = generate_patient(dataclasses.replace(SMALL, seed=12))
        assert not np.array_equal(image.pixels, other.pixels)

    def test_shape_and_dtype(self, small_patient):
        image, _ = small_patient
        assert image.pixels.shape == (480, 640, 3)
        assert image.pixels.dtype == np.uint8

    def test_patient_id_encodes_seed(self, small_patient):
        _, truth = small_patient
        assert truth.patient_id == "synth-000011"

    def test_labels_and_ordering(self, small_patient):
        _, truth = small_patient
        assert sorted(truth.labels) == list(range(13))
        assert sum(1 for v in truth.labels.values() if v == "ud") == 1
        assert truth.labels[12] == "ud"  # outliers take the last ids
        assert all(truth.labels[i] == "common" for i in range(12))

    def test_boxes_tight_and_inside(self, small_patient):
        image, truth = small_patient
        h, w = image.pixels.shape[:2]
        for lesion_id, box in enumerate(truth.boxes):
            (oy, ox), local = truth.masks[lesion_id]
            ys, xs = np.nonzero(local)
            assert len(ys) > 0
            # tight: box hugs the mask extent (pixel box convention: max + 1)
            assert box.x_min == ox + xs.min() and box.x_max == ox + xs.max() + 1
            assert box.y_min == oy + ys.min() and box.y_max == oy + ys.max() + 1
            assert 0 <= box.x_min < box.x_max <= w
            assert 0 <= box.y_min < box.y_max <= h

    def test_lesions_do_not_overlap(self, small_patient):
        _, truth = small_patient
        for i in range(len(truth.boxes)):
            for j in range(i + 1, len(truth.boxes)):
                assert iou(truth.boxes[i], truth.boxes[j]) == 0.0

    def test_lesions_darker_than_skin(self, small_patient):
        image, truth = small_patient
        px = image.pixels.astype(float)
        skin = np.ones(px.shape[:2], dtype=bool)
        lum = px @ np.array([0.299, 0.587, 0.114])
        for lesion_id in truth.labels:
            mask = truth.mask_window(lesion_id, 0, 0, max(px.shape[:2]))
            mask = mask[:px.shape[0], :px.shape[1]]
            skin &= ~mask
            assert lum[mask].mean() < lum[skin].mean() - 30

    def test_mask_window_matches_full_mask(self, small_patient):
        image, truth = small_patient
        h, w = image.pixels.shape[:2]
        full = np.zeros((h, w), dtype=bool)
        (oy, ox), local = truth.masks[0]
        full[oy:oy + local.shape[0], ox:ox + local.shape[1]] = local
        box = truth.boxes[0]
        x0 = int(box.x_min) - 7
        y0 = int(box.y_min) - 5
        window = truth.mask_window(0, x0, y0, 50)
        expected = np.zeros((50, 50), dtype=bool)
        ys = slice(max(y0, 0), min(y0 + 50, h))
        xs = slice(max(x0, 0), min(x0 + 50, w))
        expected[ys.start - y0:ys.stop - y0, xs.start - x0:xs.stop - x0] = full[ys, xs]
        np.testing.assert_array_equal(window, expected)

    def test_no_outliers(self):
        _, truth = generate_patient(dataclasses.replace(SMALL, n_outliers=0))
        assert all(v == "common" for v in truth.labels.values())

    def test_too_few_commons_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(seed=0, n_common=1)

    def test_overcrowded_image_raises(self):
        cfg = SynthConfig(seed=0, image_size=(128, 128), n_common=80, n_outliers=0)
        with pytest.raises(RuntimeError, match="larger image or fewer lesions"):
            generate_patient(cfg)


class TestSeparability:
    def test_parameter_separation_monotone_in_shift(self):
        seps = []
        for factor in (0.5, 1.0, 2.0):
            cfg = dataclasses.replace(
                SMALL, outlier_shift=OutlierShift().scaled(factor))
            _, truth = generate_patient(cfg)
            seps.append(parameter_separation(truth))
        assert seps[0] < seps[1] < seps[2]

    def test_zero_shift_small_separation(self):
        cfg = dataclasses.replace(SMALL, outlier_shift=OutlierShift().scaled(0.0))
        _, truth = generate_patient(cfg)
        base = parameter_separation(truth)
        _, shifted = generate_patient(SMALL)
        assert base < parameter_separation(shifted)

    def test_no_outlier_separation_is_zero(self):
        _, truth = generate_patient(dataclasses.replace(SMALL, n_outliers=0))
        assert parameter_separation(truth) == 0.0


class TestCorpusPlan:
    def test_exact_ud_free_share(self):
        plan = corpus_plan(75, base_seed=0)
        assert sum(1 for c in plan if c.n_outliers == 0) == 22

    def test_rounding(self):
        plan = corpus_plan(20, base_seed=5)
        assert sum(1 for c in plan if c.n_outliers == 0) == round(22 / 75 * 20)

    def test_seeds_are_sequential(self):
        plan = corpus_plan(10, base_seed=100)
        assert [c.seed for c in plan] == list(range(100, 110))

    def test_counts_within_ranges(self):
        plan = corpus_plan(40, base_seed=3, n_common_range=(5, 9),
                           n_outlier_range=(1, 2))
        for c in plan:
            assert 5 <= c.n_common <= 9
            assert c.n_outliers in (0, 1, 2)

    def test_deterministic(self):
        assert corpus_plan(12, base_seed=7) == corpus_plan(12, base_seed=7)


class TestTrainingCrops:
    def test_shapes_and_masks(self):
        pos, neg = generate_training_crops(5, 3, seed=2)
        assert len(pos) == 5 and len(neg) == 3
        for crop, mask in pos:
            assert crop.shape == (64, 64, 3) and crop.dtype == np.uint8
            assert mask.shape == (64, 64) and mask.dtype == bool
            assert mask.any()
        for crop in neg:
            assert crop.shape == (64, 64, 3)

    def test_deterministic(self):
        (a, am), (b, bm) = generate_training_crops(1, 0, seed=9)[0][0], \
            generate_training_crops(1, 0, seed=9)[0][0]
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(am, bm)


class TestWriteCorpus:
    def test_round_trip(self, tmp_path):
        corpus = generate_corpus(3, base_seed=50,
                                 template=SynthConfig(seed=0, image_size=(512, 384),
                                                      n_common=6),
                                 n_common_range=(4, 8), n_outlier_range=(1, 1),
                                 ud_free_fraction=0.0)
        write_corpus(tmp_path, corpus)

        truths = {t.patient_id: t for t in read_truth_csv(tmp_path / "truth.csv")}
        boxes = read_truth_boxes_csv(tmp_path / "truth_boxes.csv")
        assert set(truths) == {t.patient_id for _, t in corpus}
        for image, truth in corpus:
            assert truths[truth.patient_id].labels == truth.labels
            for lesion_id, box in enumerate(truth.boxes):
                got = boxes[truth.patient_id][lesion_id]
                assert (got.x_min, got.y_min, got.x_max, got.y_max) == \
                       (box.x_min, box.y_min, box.x_max, box.y_max)
            png = tmp_path / f"{truth.patient_id}.png"
            assert png.exists()
            from PIL import Image

            np.testing.assert_array_equal(np.asarray(Image.open(png)), image.pixels)
            with np.load(tmp_path / f"{truth.patient_id}_masks.npz") as npz:
                (oy, ox), local = truth.masks[0]
                np.testing.assert_array_equal(npz["mask_0"], local)
                np.testing.assert_array_equal(npz["origin_0"], [oy, ox])

    def test_skin_and_lesion_bases_are_distinct(self):
        assert np.all(np.abs(SKIN_BASE - LESION_BASE) >= 30)
