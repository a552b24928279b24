import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udscreen.synthgen import generate_training_crops
from udscreen.vae import (MODE_BASE, MODE_FINETUNED, MODE_SCRATCH, PIXELS_PER_CROP,
                          VaeModel, build_vae, embed, embed_batch, finetune, load_vae,
                          pretrain_base, recon_score, recon_scores, save_vae,
                          train_scratch, vae_loss, vae_loss_gradients)

from oracles import kl_gradients_central_diff, kl_term_ref


def crop_batch(n, seed=0, size=64, base=None):
    rng = np.random.default_rng(seed)
    if base is None:
        base = np.array([120, 90, 70])
    out = []
    for _ in range(n):
        px = base + rng.normal(0, 8, (size, size, 3))
        out.append(np.clip(np.rint(px), 0, 255).astype(np.uint8))
    return out


class TestVaeLoss:
    def test_zero_everything(self):
        b = vae_loss(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4, 3)),
                     np.zeros((1, 2)), np.zeros((1, 2)), beta=4.0)
        assert b.reconstruction == 0.0 and b.kl == 0.0 and b.total == 0.0

    def test_reconstruction_is_pixel_mse(self):
        x = np.zeros((2, 4, 4, 3))
        xh = np.full((2, 4, 4, 3), 0.5)
        b = vae_loss(x, xh, np.zeros((2, 2)), np.zeros((2, 2)))
        assert b.reconstruction == pytest.approx(0.25, abs=0)

    def test_kl_golden_single_unit(self):
        # one sample, one dimension, mu=1, log_var=0: -0.5(1 + 0 - 1 - 1) = 0.5
        b = vae_loss(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 3)),
                     np.array([[1.0]]), np.array([[0.0]]))
        assert b.kl == pytest.approx(0.5, abs=0)

    def test_kl_batch_mean(self):
        mu = np.array([[1.0], [0.0]])
        lv = np.zeros((2, 1))
        b = vae_loss(np.zeros((2, 2, 2, 3)), np.zeros((2, 2, 2, 3)), mu, lv)
        assert b.kl == pytest.approx(0.25, abs=0)

    def test_total_is_exactly_recon_plus_beta_kl(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (3, 4, 4, 3))
        xh = rng.uniform(0, 1, (3, 4, 4, 3))
        mu = rng.normal(0, 1, (3, 5))
        lv = rng.normal(0, 1, (3, 5))
        b = vae_loss(x, xh, mu, lv, beta=4.0)
        assert b.total == b.reconstruction + 4.0 * b.kl
        assert b.beta == 4.0

    def test_beta_zero_ignores_kl(self):
        b = vae_loss(np.zeros((1, 2, 2, 3)), np.full((1, 2, 2, 3), 0.1),
                     np.array([[3.0]]), np.array([[1.0]]), beta=0.0)
        assert b.total == b.reconstruction

    def test_matches_reference_kl(self):
        rng = np.random.default_rng(9)
        mu = rng.normal(0, 2, (4, 6))
        lv = rng.normal(0, 1, (4, 6))
        b = vae_loss(np.zeros((4, 2, 2, 3)), np.zeros((4, 2, 2, 3)), mu, lv)
        want = np.mean([kl_term_ref(m, l) for m, l in zip(mu, lv)])
        assert b.kl == pytest.approx(want, rel=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kl_nonnegative_property(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.normal(0, 3, (2, 8))
        lv = rng.normal(0, 2, (2, 8))
        b = vae_loss(np.zeros((2, 2, 2, 3)), np.zeros((2, 2, 2, 3)), mu, lv)
        assert b.kl >= -1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            vae_loss(np.zeros((1, 4, 4, 3)), np.zeros((1, 2, 2, 3)),
                     np.zeros((1, 2)), np.zeros((1, 2)))

    def test_non_finite_rejected(self):
        mu = np.array([[np.nan]])
        with pytest.raises(ValueError, match="non-finite"):
            vae_loss(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 3)),
                     mu, np.zeros((1, 1)))


class TestVaeLossGradients:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(4)
        mu = rng.normal(0, 1.5, (3, 4))
        lv = rng.normal(0, 0.8, (3, 4))
        beta = 4.0
        d_mu, d_lv = vae_loss_gradients(mu, lv, beta)
        ref_mu, ref_lv = kl_gradients_central_diff(mu.tolist(), lv.tolist(), beta)
        np.testing.assert_allclose(d_mu, ref_mu, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(d_lv, ref_lv, rtol=1e-4, atol=1e-7)

    def test_zero_at_prior(self):
        d_mu, d_lv = vae_loss_gradients(np.zeros((2, 3)), np.zeros((2, 3)), 4.0)
        np.testing.assert_array_equal(d_mu, 0.0)
        np.testing.assert_array_equal(d_lv, 0.0)


class TestBuildVae:
    def test_shapes(self):
        model = build_vae(latent_dim=32, seed=0)
        import torch

        with torch.no_grad():
            x = torch.zeros((2, 3, 64, 64))
            mu, lv = model.encoder(x)
            assert tuple(mu.shape) == (2, 32) and tuple(lv.shape) == (2, 32)
            xh = model.decoder(mu)
        assert tuple(xh.shape) == (2, 3, 64, 64)
        assert float(xh.min()) >= 0.0 and float(xh.max()) <= 1.0

    def test_deterministic(self):
        a, b = build_vae(seed=5), build_vae(seed=5)
        for p1, p2 in zip(a.encoder.parameters(), b.encoder.parameters()):
            np.testing.assert_array_equal(p1.detach().numpy(), p2.detach().numpy())

    def test_latent_dim_floor(self):
        with pytest.raises(ValueError, match="latent_dim"):
            build_vae(latent_dim=1)

    def test_negative_beta(self):
        with pytest.raises(ValueError, match="beta"):
            build_vae(beta=-0.5)

    def test_pixels_per_crop_constant(self):
        assert PIXELS_PER_CROP == 3 * 64 * 64


class TestTrainScratch:
    def test_needs_two_lesions(self):
        with pytest.raises(ValueError, match="at least 2"):
            train_scratch(crop_batch(1), epochs=1)

    def test_deterministic(self):
        crops = crop_batch(8, seed=1)
        m1 = train_scratch(crops, epochs=2, seed=3)
        m2 = train_scratch(crops, epochs=2, seed=3)
        assert m1.training_summary["epoch_reconstruction"] == \
               m2.training_summary["epoch_reconstruction"]
        e1 = np.stack([e.mu for e in embed_batch(m1, crops)])
        e2 = np.stack([e.mu for e in embed_batch(m2, crops)])
        np.testing.assert_array_equal(e1, e2)

    def test_memorizes_identical_crops(self):
        # the canonical convergence check: 50 copies of one lesion crop, full
        # epochs. Pixel noise is the floor here, so the crop comes from the
        # training-crop generator (sigma <= 3.5) rather than anything noisier.
        crop = generate_training_crops(1, 0, seed=2)[0][0][0]
        model = train_scratch([crop] * 50, epochs=130, seed=0)
        summary = model.training_summary
        assert summary["final_reconstruction"] < 0.01 * summary["first_reconstruction"]
        assert model.mode_tag == MODE_SCRATCH and model.is_trained

    def test_outlier_scores_above_inliers(self):
        inliers = crop_batch(24, seed=5, base=np.array([120, 90, 70]))
        outlier = crop_batch(1, seed=6, base=np.array([30, 30, 140]))[0]
        model = train_scratch(inliers, epochs=40, seed=0)
        inlier_scores = recon_scores(model, inliers)
        assert recon_score(model, outlier) > max(inlier_scores)

    def test_untrained_embed_rejected(self):
        model = build_vae()
        with pytest.raises(ValueError, match="untrained"):
            embed(model, crop_batch(1)[0])


class TestPretrainAndFinetune:
    def test_needs_two_patients(self):
        with pytest.raises(ValueError, match=">= 2 patients"):
            pretrain_base({"a": crop_batch(4)}, epochs=1)

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain_base({}, epochs=1)

    def test_zero_epoch_base_is_usable(self):
        corpus = {"a": crop_batch(3, seed=1), "b": crop_batch(3, seed=2)}
        base = pretrain_base(corpus, epochs=0, seed=0)
        assert base.mode_tag == MODE_BASE and base.is_trained
        assert len(embed_batch(base, corpus["a"])) == 3

    def test_checkpoint_round_trip_bit_identical(self, tmp_path):
        corpus = {"a": crop_batch(4, seed=1), "b": crop_batch(4, seed=2)}
        base = pretrain_base(corpus, epochs=2, seed=0,
                             checkpoint_path=tmp_path / "base.pt")
        loaded = load_vae(tmp_path / "base.pt")
        probe = crop_batch(3, seed=9)
        want = np.stack([e.mu for e in embed_batch(base, probe)])
        got = np.stack([e.mu for e in embed_batch(loaded, probe)])
        np.testing.assert_array_equal(got, want)
        assert loaded.mode_tag == MODE_BASE

    def test_finetune_requires_base(self):
        scratch = train_scratch(crop_batch(4), epochs=1, seed=0)
        with pytest.raises(ValueError, match="base"):
            finetune(scratch, crop_batch(4), epochs=1)

    def test_finetune_zero_epochs_returns_base(self):
        corpus = {"a": crop_batch(3, seed=1), "b": crop_batch(3, seed=2)}
        base = pretrain_base(corpus, epochs=1, seed=0)
        out = finetune(base, crop_batch(4), epochs=0)
        assert out is base

    def test_finetune_does_not_mutate_base(self):
        corpus = {"a": crop_batch(3, seed=1), "b": crop_batch(3, seed=2)}
        base = pretrain_base(corpus, epochs=1, seed=0)
        before = copy.deepcopy(list(base.encoder.state_dict().items()))
        tuned = finetune(base, crop_batch(6, seed=8), epochs=2, seed=0)
        assert tuned is not base and tuned.mode_tag == MODE_FINETUNED
        for (name, tensor), (_, saved) in zip(base.encoder.state_dict().items(),
                                              before):
            np.testing.assert_array_equal(tensor.numpy(), saved.numpy())

    def test_finetune_moves_weights(self):
        corpus = {"a": crop_batch(3, seed=1), "b": crop_batch(3, seed=2)}
        base = pretrain_base(corpus, epochs=1, seed=0)
        tuned = finetune(base, crop_batch(6, seed=8), epochs=2, seed=0)
        diffs = [float(np.abs(p.detach().numpy() - q.detach().numpy()).max())
                 for p, q in zip(tuned.encoder.parameters(),
                                 base.encoder.parameters())]
        assert max(diffs) > 0


@pytest.fixture(scope="module")
def small_model():
    return train_scratch(crop_batch(6, seed=4), epochs=3, seed=1)


class TestEmbedding:
    def test_embed_batch_shapes(self, small_model):
        crops = crop_batch(5, seed=11)
        embeddings = embed_batch(small_model, crops)
        assert len(embeddings) == 5
        for e in embeddings:
            assert e.mu.shape == (32,)
            assert e.mu.dtype == np.float64
            assert np.isfinite(e.mu).all()

    def test_embed_deterministic(self, small_model):
        crop = crop_batch(1, seed=12)[0]
        np.testing.assert_array_equal(embed(small_model, crop).mu,
                                      embed(small_model, crop).mu)

    def test_recon_scores_positive(self, small_model):
        scores = recon_scores(small_model, crop_batch(4, seed=13))
        assert len(scores) == 4
        assert all(isinstance(s, float) and s >= 0 for s in scores)


class TestVaeCheckpointErrors:
    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_vae(tmp_path / "no.pt")

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"nope")
        with pytest.raises(ValueError, match="unreadable"):
            load_vae(tmp_path / "bad.pt")

    def test_save_load_scratch_mode(self, tmp_path):
        model = train_scratch(crop_batch(4, seed=3), epochs=1, seed=0)
        save_vae(model, tmp_path / "m.pt")
        loaded = load_vae(tmp_path / "m.pt")
        assert loaded.mode_tag == MODE_SCRATCH and loaded.is_trained
        assert loaded.beta == model.beta and loaded.latent_dim == model.latent_dim
