"""Lesion/skin segmentation on 64x64 crops with a compact U-Net.

The network is a scaled-down encoder-decoder with skip connections and no
batch normalization; its trainable parameter count must land in a fixed
band relative to the full-size reference model (REFERENCE_UNET_PARAMS), a
budget the constructor enforces. Trained with pixel-wise cross-entropy,
Adam, and a fixed step-down schedule.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .detector import LesionCrop

CHECKPOINT_FORMAT_VERSION = 1
REFERENCE_UNET_PARAMS = 31_030_658  # canonical full-size U-Net (base 64)
PARAM_BAND = (0.055, 0.065)
THRESHOLD_GRID = tuple(np.round(np.arange(1, 20) * 0.05, 2))

ZERO_FILL = "zero_fill"
MEAN_SKIN_FILL = "mean_skin_fill"
MASKING_POLICIES = (ZERO_FILL, MEAN_SKIN_FILL)


class ParameterBudgetError(ValueError):
    pass


@dataclass
class SegmentationMask:
    probabilities: np.ndarray  # (S, S) float32 in [0, 1]
    binary: np.ndarray  # (S, S) bool
    threshold: float

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities)
        b = np.asarray(self.binary, dtype=bool)
        if p.shape != b.shape or p.ndim != 2:
            raise ValueError(f"mask shape mismatch: {p.shape} vs {b.shape}")
        if not np.array_equal(b, p >= self.threshold):
            raise ValueError("binary mask must equal probabilities >= threshold")
        self.probabilities = p
        self.binary = b

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray, threshold: float) -> "SegmentationMask":
        p = np.asarray(probabilities, dtype=np.float32)
        return cls(probabilities=p, binary=p >= threshold, threshold=float(threshold))


@dataclass
class MaskedLesion:
    """Crop with background suppressed; what the outlier model consumes."""

    lesion_id: int
    pixels: np.ndarray  # (S, S, 3) uint8
    mask: SegmentationMask
    policy: str


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.ReLU(inplace=True),
    )


class _CompactUNet(nn.Module):
    """4-level encoder/decoder with skip connections, two-class output,
    deliberately without batch normalization."""

    def __init__(self, base_channels: int):
        super().__init__()
        b = base_channels
        self.enc1 = _block(3, b)
        self.enc2 = _block(b, 2 * b)
        self.enc3 = _block(2 * b, 4 * b)
        self.enc4 = _block(4 * b, 8 * b)
        self.bottleneck = _block(8 * b, 16 * b)
        self.pool = nn.MaxPool2d(2)
        self.up4 = nn.ConvTranspose2d(16 * b, 8 * b, 2, stride=2)
        self.dec4 = _block(16 * b, 8 * b)
        self.up3 = nn.ConvTranspose2d(8 * b, 4 * b, 2, stride=2)
        self.dec3 = _block(8 * b, 4 * b)
        self.up2 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.dec2 = _block(4 * b, 2 * b)
        self.up1 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.dec1 = _block(2 * b, b)
        self.out = nn.Conv2d(b, 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        h = self.bottleneck(self.pool(e4))
        h = self.dec4(torch.cat([self.up4(h), e4], dim=1))
        h = self.dec3(torch.cat([self.up3(h), e3], dim=1))
        h = self.dec2(torch.cat([self.up2(h), e2], dim=1))
        h = self.dec1(torch.cat([self.up1(h), e1], dim=1))
        return self.out(h)


@dataclass
class SegmenterModel:
    net: _CompactUNet
    base_channels: int
    trainable_param_count: int
    binary_threshold: float = 0.5
    masking_policy: str = MEAN_SKIN_FILL
    is_trained: bool = False
    training_config: dict | None = None
    training_summary: dict | None = None

    @property
    def architecture_signature(self) -> str:
        shapes = ";".join(f"{name}:{tuple(p.shape)}"
                          for name, p in self.net.named_parameters())
        import hashlib

        digest = hashlib.sha256(shapes.encode()).hexdigest()[:12]
        return (f"unet64x64/base{self.base_channels}/levels4/classes2/"
                f"params{self.trainable_param_count}/{digest}")


def count_trainable_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def build_compact_unet(base_channels: int = 16, seed: int = 0) -> SegmenterModel:
    """Untrained compact U-Net; rejects configurations whose trainable
    parameter count leaves the [5.5%, 6.5%] band of REFERENCE_UNET_PARAMS."""
    if base_channels < 1:
        raise ValueError(f"base_channels must be >= 1, got {base_channels}")
    torch.manual_seed(seed)
    net = _CompactUNet(base_channels)
    count = count_trainable_params(net)
    low, high = (PARAM_BAND[0] * REFERENCE_UNET_PARAMS, PARAM_BAND[1] * REFERENCE_UNET_PARAMS)
    if not (low <= count <= high):
        raise ParameterBudgetError(
            f"base_channels={base_channels} gives {count:,} trainable parameters, "
            f"outside [{low:,.0f}, {high:,.0f}] "
            f"({PARAM_BAND[0]:.1%}..{PARAM_BAND[1]:.1%} of {REFERENCE_UNET_PARAMS:,})")
    if any(isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)) for m in net.modules()):
        raise ValueError("batch normalization is not allowed in this architecture")
    return SegmenterModel(net=net, base_channels=base_channels, trainable_param_count=count)


@dataclass
class SegmenterTrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    # multiply lr by step_factor at these fractions of total epochs
    step_down: tuple[float, ...] = (0.5, 0.75)
    step_factor: float = 0.1
    augment: bool = True
    seed: int = 0


def augment_pair(crop: np.ndarray, mask: np.ndarray,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation (90-degree multiples), flips, integer shift crop, and
    color jitter. Geometric transforms hit crop and mask identically; color
    jitter leaves the mask untouched.
    """
    k = int(rng.integers(0, 4))
    crop = np.rot90(crop, k, axes=(0, 1))
    mask = np.rot90(mask, k, axes=(0, 1))
    if rng.random() < 0.5:
        crop = np.flip(crop, axis=1)
        mask = np.flip(mask, axis=1)
    if rng.random() < 0.5:
        crop = np.flip(crop, axis=0)
        mask = np.flip(mask, axis=0)
    # shifted re-crop with reflected borders
    dx, dy = rng.integers(-4, 5, size=2)
    size = crop.shape[0]
    padded_c = np.pad(crop, ((4, 4), (4, 4), (0, 0)), mode="reflect")
    padded_m = np.pad(mask, ((4, 4), (4, 4)), mode="reflect")
    crop = padded_c[4 + dy:4 + dy + size, 4 + dx:4 + dx + size]
    mask = padded_m[4 + dy:4 + dy + size, 4 + dx:4 + dx + size]
    # color jitter: global brightness scale plus per-channel offsets
    scale = rng.uniform(0.85, 1.15)
    offsets = rng.uniform(-12, 12, size=3)
    jittered = np.clip(crop.astype(np.float64) * scale + offsets, 0, 255)
    return np.ascontiguousarray(jittered).astype(np.uint8), np.ascontiguousarray(mask)


def _crop_pixels(crop) -> np.ndarray:
    if isinstance(crop, LesionCrop):
        return crop.pixels
    return np.asarray(crop)


def train_segmenter(
    model: SegmenterModel,
    positives: Sequence[tuple[np.ndarray, np.ndarray]],
    negatives: Sequence[np.ndarray],
    config: SegmenterTrainConfig = SegmenterTrainConfig(),
) -> SegmenterModel:
    """Pixel-wise cross-entropy training on (crop, mask) pairs plus skin-only
    negatives, with augmentation. Returns the same model, trained in place;
    epochs=0 is a no-op.
    """
    if not positives:
        raise ValueError("no positive (crop, mask) pairs supplied")
    if not negatives:
        warnings.warn("training without skin-only negatives invites false-positive "
                      "masks on clear skin", stacklevel=2)
    if config.epochs == 0:
        return model

    size = _crop_pixels(positives[0][0]).shape[0]
    pairs = [(np.asarray(_crop_pixels(c), dtype=np.uint8), np.asarray(m, dtype=bool))
             for c, m in positives]
    pairs += [(np.asarray(_crop_pixels(c), dtype=np.uint8), np.zeros((size, size), dtype=bool))
              for c in negatives]

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    step_epochs = {int(round(f * config.epochs)) for f in config.step_down}

    n = len(pairs)
    epoch_losses: list[float] = []
    model.net.train()
    for epoch in range(config.epochs):
        if epoch in step_epochs and epoch > 0:
            for group in optimizer.param_groups:
                group["lr"] *= config.step_factor
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            crops, masks = [], []
            for i in idx:
                c, m = pairs[i]
                if config.augment:
                    c, m = augment_pair(c, m, rng)
                crops.append(c)
                masks.append(m)
            x = torch.from_numpy(np.stack(crops).astype(np.float32) / 255.0).permute(0, 3, 1, 2)
            y = torch.from_numpy(np.stack(masks).astype(np.int64))
            out = model.net(x)
            loss = loss_fn(out, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)

    model.net.eval()
    model.is_trained = True
    model.training_config = dataclasses.asdict(config)
    model.training_summary = {"epoch_losses": epoch_losses,
                              "first_loss": epoch_losses[0],
                              "final_loss": epoch_losses[-1]}
    return model


def _probabilities(model: SegmenterModel, pixels: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(pixels.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
    with torch.no_grad():
        logits = model.net(x)
        probs = torch.softmax(logits, dim=1)[0, 1]
    return probs.numpy().astype(np.float32)


def segment(model: SegmenterModel, crop: LesionCrop | np.ndarray) -> SegmentationMask:
    """Foreground probability map and thresholded binary mask for one crop."""
    if not model.is_trained:
        raise ValueError("segmenter is untrained; train or load a checkpoint first")
    return SegmentationMask.from_probabilities(
        _probabilities(model, _crop_pixels(crop)), model.binary_threshold)


def _pair_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def mean_iou(model: SegmenterModel, validation: Sequence[tuple[np.ndarray, np.ndarray]],
             threshold: float | None = None) -> float:
    t = model.binary_threshold if threshold is None else threshold
    scores = []
    for crop, truth in validation:
        probs = _probabilities(model, _crop_pixels(crop))
        scores.append(_pair_iou(probs >= t, np.asarray(truth, dtype=bool)))
    return float(np.mean(scores))


def select_threshold(model: SegmenterModel,
                     validation: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Grid-search {0.05 .. 0.95} for the mean-IoU-maximizing binary threshold;
    ties resolve toward 0.5 (then toward the smaller value)."""
    if not validation:
        raise ValueError("empty validation set")
    prob_truth = [(_probabilities(model, _crop_pixels(c)), np.asarray(m, dtype=bool))
                  for c, m in validation]
    scores = {}
    for t in THRESHOLD_GRID:
        scores[t] = float(np.mean([_pair_iou(p >= t, m) for p, m in prob_truth]))
    best = max(scores.values())
    candidates = [t for t, s in scores.items() if s >= best - 1e-12]
    return float(min(candidates, key=lambda t: (abs(t - 0.5), t)))


def apply_mask(crop: LesionCrop | np.ndarray, mask: SegmentationMask,
               policy: str = MEAN_SKIN_FILL, lesion_id: int | None = None) -> MaskedLesion:
    """Suppress background: keep foreground pixels, fill background with zeros
    (zero_fill) or with the rounded mean RGB of this crop's background pixels
    (mean_skin_fill)."""
    if policy not in MASKING_POLICIES:
        raise ValueError(f"unknown masking policy {policy!r}")
    pixels = _crop_pixels(crop)
    if pixels.shape[:2] != mask.binary.shape:
        raise ValueError(f"crop {pixels.shape[:2]} vs mask {mask.binary.shape} shape mismatch")
    background = ~mask.binary
    out = pixels.copy()
    if policy == ZERO_FILL:
        out[background] = 0
    elif background.any():
        fill = np.rint(pixels[background].mean(axis=0)).astype(np.uint8)
        out[background] = fill
    if lesion_id is None:
        lesion_id = crop.lesion_id if isinstance(crop, LesionCrop) else 0
    return MaskedLesion(lesion_id=lesion_id, pixels=out, mask=mask, policy=policy)


def save_segmenter(model: SegmenterModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.net.state_dict(),
        "base_channels": model.base_channels,
        "binary_threshold": model.binary_threshold,
        "masking_policy": model.masking_policy,
        "is_trained": model.is_trained,
        "training_config": model.training_config,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }, path)
    sidecar = {
        "trainable_param_count": model.trainable_param_count,
        "binary_threshold": model.binary_threshold,
        "masking_policy": model.masking_policy,
        "training_config": model.training_config,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_segmenter(path: str | Path) -> SegmenterModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"segmenter checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        base_channels = payload["base_channels"]
    except Exception as exc:
        raise ValueError(f"unreadable segmenter checkpoint {path}: {exc}") from exc
    model = build_compact_unet(base_channels)
    model.net.load_state_dict(payload["state_dict"])
    model.net.eval()
    model.binary_threshold = payload["binary_threshold"]
    model.masking_policy = payload.get("masking_policy", MEAN_SKIN_FILL)
    model.is_trained = payload["is_trained"]
    model.training_config = payload.get("training_config")
    return model
