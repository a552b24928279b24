"""Per-patient lesion appearance modelling with a convolutional beta-VAE.

Two training modes: from-scratch self-training on one patient's lesions, and
a fast mode that finetunes a base model pretrained on a pooled multi-patient
corpus. Inference is sampling-free (encoder mean only), so embeddings and
reconstruction scores are deterministic.

Loss bookkeeping vs. training objective: the reported VaeLossBreakdown keeps
reconstruction as the mean squared error per pixel channel and
total = reconstruction + beta * kl. The trainer minimizes the same quantity
with the reconstruction term at Gaussian log-likelihood scale (summed over
the PIXELS_PER_CROP pixel channels, i.e. PIXELS_PER_CROP * mse + beta * kl);
at the per-pixel-mean scale the KL term dominates and the posterior
collapses before the encoder learns anything usable.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .detector import LesionCrop
from .segmenter import MaskedLesion

CHECKPOINT_FORMAT_VERSION = 1
CROP_SIZE = 64
PIXELS_PER_CROP = 3 * CROP_SIZE * CROP_SIZE

MODE_SCRATCH = "scratch"
MODE_BASE = "base"
MODE_FINETUNED = "finetuned"

DEFAULT_SCRATCH_EPOCHS = 130
DEFAULT_FINETUNE_EPOCHS = 10
DEFAULT_PRETRAIN_EPOCHS = 60


@dataclass
class LatentEmbedding:
    lesion_id: int
    mu: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1:
            raise ValueError(f"embedding must be a vector, got shape {mu.shape}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("embedding has non-finite entries")
        self.mu = mu


@dataclass(frozen=True)
class VaeLossBreakdown:
    reconstruction: float
    kl: float
    total: float
    beta: float


class _Encoder(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(128, 256, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.fc_mu = nn.Linear(256 * 4 * 4, latent_dim)
        self.fc_logvar = nn.Linear(256 * 4 * 4, latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)


class _Decoder(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.fc = nn.Linear(latent_dim, 256 * 4 * 4)
        self.conv = nn.Sequential(
            nn.ConvTranspose2d(256, 128, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(128, 64, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(32, 3, 4, stride=2, padding=1), nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.conv(self.fc(z).view(-1, 256, 4, 4))


@dataclass
class VaeModel:
    encoder: _Encoder
    decoder: _Decoder
    latent_dim: int
    beta: float
    mode_tag: str = MODE_SCRATCH
    is_trained: bool = False
    training_summary: dict | None = None
    corpus_fingerprint: str | None = None

    def eval_mode(self) -> "VaeModel":
        self.encoder.eval()
        self.decoder.eval()
        return self


def build_vae(latent_dim: int = 32, beta: float = 4.0, seed: int = 0) -> VaeModel:
    if latent_dim < 2:
        raise ValueError(f"latent_dim must be >= 2, got {latent_dim}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    torch.manual_seed(seed)
    return VaeModel(encoder=_Encoder(latent_dim), decoder=_Decoder(latent_dim),
                    latent_dim=latent_dim, beta=beta).eval_mode()


def _as_float_batch(lesions) -> np.ndarray:
    """Stack MaskedLesion / LesionCrop / uint8 arrays into (N, S, S, 3) in [0, 1]."""
    arrays = []
    for lesion in lesions:
        if isinstance(lesion, MaskedLesion):
            px = lesion.pixels
        elif isinstance(lesion, LesionCrop):
            px = lesion.pixels
        else:
            px = np.asarray(lesion)
        if px.dtype == np.uint8:
            arrays.append(px.astype(np.float32) / 255.0)
        else:
            arrays.append(px.astype(np.float32))
    return np.stack(arrays)


def _lesion_ids(lesions) -> list[int]:
    ids = []
    for i, lesion in enumerate(lesions):
        if isinstance(lesion, (MaskedLesion, LesionCrop)):
            ids.append(lesion.lesion_id)
        else:
            ids.append(i)
    return ids


def vae_loss(inputs, reconstruction, mu, log_var, beta: float = 4.0) -> VaeLossBreakdown:
    """Reported loss breakdown (float64): reconstruction = mean squared error
    over every pixel and channel; kl = batch mean of the closed-form KL to the
    unit Gaussian, summed over latent dimensions; total = recon + beta * kl.
    """
    x = np.asarray(inputs, dtype=np.float64)
    xh = np.asarray(reconstruction, dtype=np.float64)
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    lv = np.atleast_2d(np.asarray(log_var, dtype=np.float64))
    if x.shape != xh.shape:
        raise ValueError(f"input {x.shape} vs reconstruction {xh.shape} shape mismatch")
    if mu.shape != lv.shape:
        raise ValueError(f"mu {mu.shape} vs log_var {lv.shape} shape mismatch")
    for name, arr in (("inputs", x), ("reconstruction", xh), ("mu", mu), ("log_var", lv)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    recon = float(np.mean((x - xh) ** 2))
    kl = float(np.mean(-0.5 * np.sum(1.0 + lv - mu ** 2 - np.exp(lv), axis=-1)))
    return VaeLossBreakdown(reconstruction=recon, kl=kl,
                            total=recon + beta * kl, beta=beta)


def vae_loss_gradients(mu, log_var, beta: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form gradient of vae_loss().total w.r.t. mu and log_var.

    Only the KL term depends on (mu, log_var):
      d total / d mu      = beta * mu / B
      d total / d log_var = beta * (exp(log_var) - 1) / (2 B)
    with B the batch size.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    lv = np.atleast_2d(np.asarray(log_var, dtype=np.float64))
    batch = mu.shape[0]
    return beta * mu / batch, beta * (np.exp(lv) - 1.0) / (2.0 * batch)


def _corpus_fingerprint(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()[:16]


def _fit(model: VaeModel, data: np.ndarray, epochs: int, seed: int,
         lr: float = 1e-3, batch_size: int = 64) -> VaeModel:
    """Adam training of encoder+decoder on (N, S, S, 3) float data in [0, 1].

    Objective per batch: PIXELS_PER_CROP * mse + beta * kl (see module
    docstring); recorded losses keep the reported per-pixel mean scale.
    """
    x_all = torch.from_numpy(data).permute(0, 3, 1, 2).contiguous()
    n = x_all.shape[0]
    torch.manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    model.encoder.train()
    model.decoder.train()
    epoch_recon: list[float] = []
    epoch_kl: list[float] = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        recon_sum = kl_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xb = x_all[idx]
            mu, lv = model.encoder(xb)
            noise = torch.randn(mu.shape, generator=noise_gen)
            z = mu + noise * torch.exp(0.5 * lv)
            xh = model.decoder(z)
            recon = ((xb - xh) ** 2).mean()
            kl = (-0.5 * (1.0 + lv - mu * mu - lv.exp()).sum(dim=1)).mean()
            loss = recon * PIXELS_PER_CROP + model.beta * kl
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            recon_sum += recon.item() * len(idx)
            kl_sum += kl.item() * len(idx)
        epoch_recon.append(recon_sum / n)
        epoch_kl.append(kl_sum / n)
    model.eval_mode()
    model.is_trained = epochs > 0 or model.is_trained
    summary = {"epochs": epochs, "seed": seed, "lr": lr, "batch_size": batch_size,
               "epoch_reconstruction": epoch_recon, "epoch_kl": epoch_kl}
    if epoch_recon:
        summary["first_reconstruction"] = epoch_recon[0]
        summary["final_reconstruction"] = epoch_recon[-1]
    model.training_summary = summary
    model.corpus_fingerprint = _corpus_fingerprint(data)
    return model


def train_scratch(lesions: Sequence, epochs: int = DEFAULT_SCRATCH_EPOCHS, seed: int = 0,
                  latent_dim: int = 32, beta: float = 4.0, lr: float = 1e-3,
                  batch_size: int = 64) -> VaeModel:
    """Self-train a fresh model on one patient's lesions only."""
    if len(lesions) < 2:
        raise ValueError("need at least 2 lesions to self-train; "
                         "skip outlier analysis for this patient")
    model = build_vae(latent_dim=latent_dim, beta=beta, seed=seed)
    model.mode_tag = MODE_SCRATCH
    return _fit(model, _as_float_batch(lesions), epochs, seed, lr, batch_size)


def pretrain_base(corpus: Mapping[str, Sequence], epochs: int = DEFAULT_PRETRAIN_EPOCHS,
                  seed: int = 0, latent_dim: int = 32, beta: float = 4.0,
                  lr: float = 1e-3, batch_size: int = 64,
                  checkpoint_path: str | Path | None = None) -> VaeModel:
    """Train the shared base model on lesions pooled from several patients.

    corpus maps patient_id -> lesions; at least 2 patients required. With
    epochs=0 the randomly initialized base is still usable (ablation arm).
    Writes a checkpoint when checkpoint_path is given.
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if len(corpus) < 2:
        raise ValueError(f"base pretraining needs lesions from >= 2 patients, "
                         f"got {len(corpus)}")
    pooled = [lesion for patient in sorted(corpus) for lesion in corpus[patient]]
    if not pooled:
        raise ValueError("empty pretraining corpus")
    model = build_vae(latent_dim=latent_dim, beta=beta, seed=seed)
    model.mode_tag = MODE_BASE
    data = _as_float_batch(pooled)
    if epochs > 0:
        _fit(model, data, epochs, seed, lr, batch_size)
    else:
        model.corpus_fingerprint = _corpus_fingerprint(data)
        model.training_summary = {"epochs": 0, "seed": seed}
    model.mode_tag = MODE_BASE
    model.is_trained = True
    if checkpoint_path is not None:
        save_vae(model, checkpoint_path)
    return model


def finetune(base: VaeModel, lesions: Sequence, epochs: int = DEFAULT_FINETUNE_EPOCHS,
             seed: int = 0, lr: float = 1e-3, batch_size: int = 64) -> VaeModel:
    """Adapt a base model to one patient. epochs=0 returns the base unchanged
    (embedding-only fast path)."""
    if base.mode_tag not in (MODE_BASE, MODE_FINETUNED):
        raise ValueError(f"finetune expects a base model, got mode {base.mode_tag!r}")
    if epochs == 0:
        return base
    if len(lesions) < 2:
        raise ValueError("need at least 2 lesions to finetune; "
                         "skip outlier analysis for this patient")
    model = VaeModel(encoder=copy.deepcopy(base.encoder),
                     decoder=copy.deepcopy(base.decoder),
                     latent_dim=base.latent_dim, beta=base.beta,
                     mode_tag=MODE_FINETUNED, is_trained=True)
    _fit(model, _as_float_batch(lesions), epochs, seed, lr, batch_size)
    model.mode_tag = MODE_FINETUNED
    return model


def _require_usable(model: VaeModel) -> None:
    if model.mode_tag == MODE_SCRATCH and not model.is_trained:
        raise ValueError("model is untrained; train_scratch/finetune first")


def embed_batch(model: VaeModel, lesions: Sequence) -> list[LatentEmbedding]:
    """Deterministic embeddings (encoder mean, no sampling) for many lesions."""
    _require_usable(model)
    if len(lesions) == 0:
        return []
    x = torch.from_numpy(_as_float_batch(lesions)).permute(0, 3, 1, 2).contiguous()
    model.encoder.eval()
    with torch.no_grad():
        mu, _ = model.encoder(x)
    mus = mu.numpy().astype(np.float64)
    return [LatentEmbedding(lesion_id=lid, mu=mus[i])
            for i, lid in enumerate(_lesion_ids(lesions))]


def embed(model: VaeModel, lesion) -> LatentEmbedding:
    return embed_batch(model, [lesion])[0]


def recon_score(model: VaeModel, lesion) -> float:
    """Reconstruction term of vae_loss for one lesion, decoding from mu."""
    return recon_scores(model, [lesion])[0]


def recon_scores(model: VaeModel, lesions: Sequence) -> list[float]:
    _require_usable(model)
    if len(lesions) == 0:
        return []
    data = _as_float_batch(lesions)
    x = torch.from_numpy(data).permute(0, 3, 1, 2).contiguous()
    model.encoder.eval()
    model.decoder.eval()
    with torch.no_grad():
        mu, _ = model.encoder(x)
        xh = model.decoder(mu)
    diff = (x.numpy().astype(np.float64) - xh.numpy().astype(np.float64)) ** 2
    return [float(diff[i].mean()) for i in range(diff.shape[0])]


def save_vae(model: VaeModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = model.training_summary or {}
    torch.save({
        "encoder": model.encoder.state_dict(),
        "decoder": model.decoder.state_dict(),
        "latent_dim": model.latent_dim,
        "beta": model.beta,
        "mode_tag": model.mode_tag,
        "is_trained": model.is_trained,
        "training_summary": summary,
        "corpus_fingerprint": model.corpus_fingerprint,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }, path)
    sidecar = {
        "latent_dim": model.latent_dim,
        "beta": model.beta,
        "training_corpus_fingerprint": model.corpus_fingerprint,
        "epochs": summary.get("epochs"),
        "seed": summary.get("seed"),
        "mode_tag": model.mode_tag,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_vae(path: str | Path) -> VaeModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"VAE checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        latent_dim = payload["latent_dim"]
    except Exception as exc:
        raise ValueError(f"unreadable VAE checkpoint {path}: {exc}") from exc
    model = build_vae(latent_dim=latent_dim, beta=payload["beta"])
    model.encoder.load_state_dict(payload["encoder"])
    model.decoder.load_state_dict(payload["decoder"])
    model.mode_tag = payload["mode_tag"]
    model.is_trained = payload["is_trained"]
    model.training_summary = payload.get("training_summary")
    model.corpus_fingerprint = payload.get("corpus_fingerprint")
    return model.eval_mode()
