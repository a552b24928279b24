import numpy as np
import pytest
import torch

import udscreen.segmenter as segmenter_module
from udscreen.detector import LesionCrop
from udscreen.segmenter import (MEAN_SKIN_FILL, PARAM_BAND, REFERENCE_UNET_PARAMS,
                                THRESHOLD_GRID, ZERO_FILL, ParameterBudgetError,
                                SegmentationMask, SegmenterTrainConfig, apply_mask,
                                augment_pair, build_compact_unet, load_segmenter,
                                mean_iou, save_segmenter, segment, select_threshold,
                                train_segmenter)
from udscreen.synthgen import generate_training_crops
from udscreen.tiling import BoundingBox


class TestArchitecture:
    def test_parameter_count_in_band(self):
        model = build_compact_unet()
        frac = model.trainable_param_count / REFERENCE_UNET_PARAMS
        assert PARAM_BAND[0] <= frac <= PARAM_BAND[1]

    def test_exact_default_count(self):
        assert build_compact_unet().trainable_param_count == 1_941_122

    def test_full_size_rejected(self):
        with pytest.raises(ParameterBudgetError):
            build_compact_unet(base_channels=64)

    def test_too_small_rejected(self):
        with pytest.raises(ParameterBudgetError):
            build_compact_unet(base_channels=4)

    def test_no_batchnorm(self):
        model = build_compact_unet()
        assert not any(isinstance(m, torch.nn.BatchNorm2d)
                       for m in model.net.modules())

    def test_build_deterministic(self):
        a, b = build_compact_unet(seed=3), build_compact_unet(seed=3)
        for p1, p2 in zip(a.net.parameters(), b.net.parameters()):
            np.testing.assert_array_equal(p1.detach().numpy(), p2.detach().numpy())
        assert a.architecture_signature == b.architecture_signature

    def test_output_shape_two_classes(self):
        model = build_compact_unet()
        x = torch.zeros((1, 3, 64, 64))
        assert tuple(model.net(x).shape) == (1, 2, 64, 64)


class TestSegmentationMask:
    def test_binary_must_match_threshold(self):
        probs = np.array([[0.2, 0.8], [0.5, 0.4]], dtype=np.float32)
        with pytest.raises(ValueError):
            SegmentationMask(probabilities=probs,
                             binary=np.zeros((2, 2), bool), threshold=0.5)

    def test_from_probabilities(self):
        probs = np.array([[0.2, 0.8], [0.5, 0.4]], dtype=np.float32)
        m = SegmentationMask.from_probabilities(probs, 0.5)
        np.testing.assert_array_equal(m.binary, [[False, True], [True, False]])


class TestAugmentPair:
    def test_mask_tracks_lesion_pixels(self):
        # crop made from the mask itself: any geometric desync between the
        # two transforms would put bright pixels outside the mask
        rng = np.random.default_rng(0)
        for _ in range(100):
            mask = np.zeros((64, 64), bool)
            mask[20:40, 10:50] = True
            crop = np.where(mask[..., None], 255, 0).astype(np.uint8)
            aug_crop, aug_mask = augment_pair(crop, mask, rng)
            assert aug_crop.shape == (64, 64, 3) and aug_mask.shape == (64, 64)
            assert aug_mask.any() and not aug_mask.all()
            fg = aug_crop[aug_mask].mean()
            bg = aug_crop[~aug_mask].mean()
            assert fg > bg + 100

    def test_deterministic_given_rng_state(self):
        crop = np.arange(64 * 64 * 3, dtype=np.uint8).reshape(64, 64, 3)
        mask = np.zeros((64, 64), bool)
        mask[10:30, 10:30] = True
        a = augment_pair(crop, mask, np.random.default_rng(5))
        b = augment_pair(crop, mask, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestTraining:
    def test_example_mean_iou_gate(self, trained_segmenter):
        validation, _ = generate_training_crops(100, 0, seed=777)
        assert mean_iou(trained_segmenter, validation) >= 0.7

    def test_skin_only_crops_stay_clean(self, trained_segmenter):
        _, negatives = generate_training_crops(0, 20, seed=778)
        for crop in negatives:
            mask = segment(trained_segmenter, crop)
            assert mask.binary.mean() < 0.05

    def test_loss_decreased(self, trained_segmenter):
        summary = trained_segmenter.training_summary
        assert summary["final_loss"] < summary["first_loss"]

    def test_zero_epochs_is_noop(self):
        model = build_compact_unet()
        positives, negatives = generate_training_crops(2, 1, seed=1)
        out = train_segmenter(model, positives, negatives,
                              SegmenterTrainConfig(epochs=0))
        assert out is model and not out.is_trained

    def test_no_positives_rejected(self):
        model = build_compact_unet()
        with pytest.raises(ValueError, match="positive"):
            train_segmenter(model, [], [], SegmenterTrainConfig(epochs=1))

    def test_no_negatives_warns(self):
        model = build_compact_unet()
        positives, _ = generate_training_crops(2, 0, seed=1)
        with pytest.warns(UserWarning, match="negatives"):
            train_segmenter(model, positives, [], SegmenterTrainConfig(epochs=1))

    def test_untrained_segment_rejected(self):
        model = build_compact_unet()
        with pytest.raises(ValueError, match="untrained"):
            segment(model, np.zeros((64, 64, 3), np.uint8))


class FakeValidation:
    """Fixed probability maps injected under select_threshold/mean_iou."""

    def __init__(self, monkeypatch, prob_maps):
        self.maps = {id(k): v for k, v in prob_maps}

        def fake_probabilities(model, pixels):
            return self.maps[id(pixels)]

        monkeypatch.setattr(segmenter_module, "_probabilities", fake_probabilities)


class TestSelectThreshold:
    def make_model(self):
        model = build_compact_unet()
        model.is_trained = True
        return model

    def test_probabilities_equal_truth_picks_center(self, monkeypatch):
        truth = np.zeros((8, 8), bool)
        truth[2:6, 2:6] = True
        crop = np.zeros((8, 8, 3), np.uint8)
        FakeValidation(monkeypatch, [(crop, truth.astype(np.float32))])
        # every grid threshold reproduces the truth exactly; tie resolves to 0.5
        assert select_threshold(self.make_model(), [(crop, truth)]) == 0.5

    def test_tie_resolves_toward_half(self, monkeypatch):
        truth = np.ones((4, 4), bool)
        crop = np.zeros((4, 4, 3), np.uint8)
        FakeValidation(monkeypatch, [(crop, np.full((4, 4), 0.3, np.float32))])
        # thresholds <= 0.30 are perfect and tie; 0.30 is closest to 0.5
        assert select_threshold(self.make_model(), [(crop, truth)]) == 0.3

    def test_unique_maximum_wins(self, monkeypatch):
        truth = np.zeros((4, 4), bool)
        truth[0, :2] = True
        probs = np.zeros((4, 4), np.float32)
        probs[0, :2] = 0.40
        probs[0, 2] = 0.36  # spurious pixel that only t=0.40 excludes
        crop = np.zeros((4, 4, 3), np.uint8)
        FakeValidation(monkeypatch, [(crop, probs)])
        assert select_threshold(self.make_model(), [(crop, truth)]) == 0.4

    def test_empty_validation_rejected(self):
        with pytest.raises(ValueError):
            select_threshold(self.make_model(), [])

    def test_result_is_grid_optimal(self, trained_segmenter):
        validation, _ = generate_training_crops(20, 0, seed=779)
        best = select_threshold(trained_segmenter, validation)
        assert best in THRESHOLD_GRID
        best_iou = mean_iou(trained_segmenter, validation, threshold=best)
        for t in THRESHOLD_GRID:
            assert best_iou >= mean_iou(trained_segmenter, validation, threshold=t) - 1e-12


class TestApplyMask:
    def make_inputs(self):
        rng = np.random.default_rng(2)
        crop = rng.integers(0, 256, (8, 8, 3), np.uint8)
        binary = np.zeros((8, 8), bool)
        binary[2:5, 3:7] = True
        probs = binary.astype(np.float32)
        mask = SegmentationMask(probabilities=probs, binary=binary, threshold=0.5)
        return crop, mask, binary

    def test_zero_fill(self):
        crop, mask, binary = self.make_inputs()
        out = apply_mask(crop, mask, ZERO_FILL)
        np.testing.assert_array_equal(out.pixels[binary], crop[binary])
        assert (out.pixels[~binary] == 0).all()

    def test_mean_skin_fill(self):
        crop, mask, binary = self.make_inputs()
        out = apply_mask(crop, mask, MEAN_SKIN_FILL)
        np.testing.assert_array_equal(out.pixels[binary], crop[binary])
        expected = np.rint(crop[~binary].mean(axis=0)).astype(np.uint8)
        assert (out.pixels[~binary] == expected).all()

    def test_mean_fill_idempotent(self):
        crop, mask, binary = self.make_inputs()
        once = apply_mask(crop, mask, MEAN_SKIN_FILL)
        twice = apply_mask(once.pixels, mask, MEAN_SKIN_FILL)
        np.testing.assert_array_equal(once.pixels, twice.pixels)

    def test_all_foreground_is_noop(self):
        crop = np.full((4, 4, 3), 9, np.uint8)
        binary = np.ones((4, 4), bool)
        mask = SegmentationMask(probabilities=binary.astype(np.float32),
                                binary=binary, threshold=0.5)
        out = apply_mask(crop, mask, MEAN_SKIN_FILL)
        np.testing.assert_array_equal(out.pixels, crop)

    def test_unknown_policy(self):
        crop, mask, _ = self.make_inputs()
        with pytest.raises(ValueError, match="policy"):
            apply_mask(crop, mask, "blur")

    def test_shape_mismatch(self):
        _, mask, _ = self.make_inputs()
        with pytest.raises(ValueError, match="mismatch"):
            apply_mask(np.zeros((16, 16, 3), np.uint8), mask)

    def test_lesion_id_carried_from_crop(self):
        crop, mask, _ = self.make_inputs()
        lesion = LesionCrop(lesion_id=7, pixels=crop,
                            source_box=BoundingBox(x_min=0, y_min=0, x_max=8, y_max=8),
                            center=(4.0, 4.0))
        assert apply_mask(lesion, mask).lesion_id == 7


class TestPairIouEdgeCases:
    def test_empty_prediction_and_truth(self, monkeypatch):
        model = build_compact_unet()
        model.is_trained = True
        crop = np.zeros((4, 4, 3), np.uint8)
        FakeValidation(monkeypatch, [(crop, np.zeros((4, 4), np.float32))])
        truth = np.zeros((4, 4), bool)
        assert mean_iou(model, [(crop, truth)]) == 1.0


class TestCheckpoint:
    def test_round_trip(self, trained_segmenter, tmp_path):
        trained_segmenter.binary_threshold = 0.45
        save_segmenter(trained_segmenter, tmp_path / "seg.pt")
        loaded = load_segmenter(tmp_path / "seg.pt")
        crop = generate_training_crops(1, 0, seed=780)[0][0][0]
        got = segment(loaded, crop)
        want = segment(trained_segmenter, crop)
        np.testing.assert_array_equal(got.probabilities, want.probabilities)
        np.testing.assert_array_equal(got.binary, want.binary)
        assert loaded.binary_threshold == 0.45
        assert loaded.masking_policy == trained_segmenter.masking_policy
        assert loaded.is_trained
        trained_segmenter.binary_threshold = 0.5  # restore for other tests

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_segmenter(tmp_path / "missing.pt")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "seg.pt"
        path.write_bytes(b"garbage")
        with pytest.raises(ValueError):
            load_segmenter(path)
