"""Per-tile lesion detection.

Two interchangeable detectors behind one model type:

* ``classical`` — a deterministic multi-scale center-surround blob detector,
  needing no training data: luminance/chroma contrast maps, difference-of-
  Gaussian responses at several scales, thresholding, connected components,
  tight boxes, per-tile normalized contrast as confidence.
* ``neural`` — a small anchor-based convolutional detector trained on
  labelled 512x512 tiles (square anchors on a stride-8 grid).

Both emit tile-coordinate BoundingBoxes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .tiling import BoundingBox, Tile, WideFieldImage, iou, nms, reflect_window

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_SIGMAS = (1.5, 3.0, 6.0, 12.0, 20.0)
DEFAULT_ANCHOR_SIZES = (12, 24, 48)
_STEM_STRIDE = 8


@dataclass
class LesionCrop:
    """Fixed-size window cut around one detected lesion."""

    lesion_id: int
    pixels: np.ndarray  # (crop_size, crop_size, 3) uint8
    source_box: BoundingBox
    center: tuple[float, float]

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise ValueError(f"expected square (S, S, 3) crop, got {px.shape}")

    @property
    def crop_size(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class DetectorTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    anchor_sizes: tuple[int, ...] = DEFAULT_ANCHOR_SIZES
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    neg_ratio: int = 3  # hard negatives mined per positive anchor
    box_loss_weight: float = 2.0
    confidence_threshold: float = 0.35


@dataclass
class DetectorModel:
    kind: str  # 'classical' | 'neural'
    confidence_threshold: float = 0.1
    crop_size: int = 64
    net: nn.Module | None = None
    anchor_sizes: tuple[int, ...] = DEFAULT_ANCHOR_SIZES
    min_diameter_px: int = 6
    min_contrast: float = 6.0
    training_config: dict | None = None
    training_summary: dict | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("classical", "neural"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "classical" and self.net is not None:
            raise ValueError("classical detector carries no weights")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError(f"confidence_threshold {self.confidence_threshold} outside [0, 1]")


def classical_detector(confidence_threshold: float = 0.1, min_diameter_px: int = 6,
                       min_contrast: float = 6.0, crop_size: int = 64) -> DetectorModel:
    return DetectorModel(kind="classical", confidence_threshold=confidence_threshold,
                         min_diameter_px=min_diameter_px, min_contrast=min_contrast,
                         crop_size=crop_size)


def _tile_pixels(tile: Tile | np.ndarray) -> np.ndarray:
    return tile.pixels if isinstance(tile, Tile) else np.asarray(tile)


@lru_cache(maxsize=8)
def _disk_footprint(diameter: int) -> np.ndarray:
    c = (diameter - 1) / 2.0
    yy, xx = np.mgrid[:diameter, :diameter]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (diameter / 2.0) ** 2


def baseline_blob_detect(
    tile: Tile | np.ndarray,
    min_diameter_px: int = 6,
    min_contrast: float = 6.0,
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    nms_iou: float = 0.45,
) -> list[BoundingBox]:
    """Deterministic classical blob detector for one tile.

    Contrast maps: negative luminance (lesions are dark) and a red-chroma
    channel (lesions are redder than skin). Each is filtered with a
    center-surround difference of Gaussians at several scales; responses
    above min_contrast become connected components with tight boxes.
    Confidence is blob peak contrast normalized by the tile's maximum.
    """
    pixels = _tile_pixels(tile).astype(np.float32)
    lum = 0.299 * pixels[..., 0] + 0.587 * pixels[..., 1] + 0.114 * pixels[..., 2]
    chroma = pixels[..., 0] - 0.5 * (pixels[..., 1] + pixels[..., 2])

    # blur both channels together, walking the scales in ascending order so
    # each blur extends the previous one (variances add under composition)
    channels = np.stack([-lum, chroma])
    blurred: dict[float, np.ndarray] = {}
    current, current_sigma = channels, 0.0
    for s in sorted({float(s) for sigma in sigmas for s in (sigma, 2.2 * sigma)}):
        step = np.sqrt(s * s - current_sigma * current_sigma)
        current = ndimage.gaussian_filter(current, sigma=(0.0, step, step), truncate=3.0)
        blurred[s] = current
        current_sigma = s

    candidates = []  # (box coords, peak contrast)
    for sigma in sigmas:
        diff = blurred[float(sigma)] - blurred[2.2 * float(sigma)]
        response = np.maximum(diff[0], diff[1])
        labelled, count = ndimage.label(response > min_contrast)
        if count == 0:
            continue
        footprint = _disk_footprint(min_diameter_px)
        peaks = ndimage.maximum(response, labelled, index=np.arange(1, count + 1))
        for k, slc in enumerate(ndimage.find_objects(labelled)):
            y0, y1 = slc[0].start, slc[0].stop
            x0, x1 = slc[1].start, slc[1].stop
            if min(x1 - x0, y1 - y0) < min_diameter_px:
                continue
            # a blob is >= min_diameter only if it contains a full disk of
            # that diameter; box sides cannot tell a blob from a thin
            # crescent of rim response whose box spans the whole arc
            component = labelled[slc] == k + 1
            if not ndimage.binary_erosion(component, structure=footprint).any():
                continue
            candidates.append(((float(x0), float(y0), float(x1), float(y1)), float(peaks[k])))
    if not candidates:
        return []

    # one blob can fire at several scales with near-concentric boxes whose
    # mutual IoU stays under the NMS threshold; dedupe by containment first
    candidates.sort(key=lambda c: (-c[1], c[0]))
    kept: list[tuple[tuple[float, float, float, float], float]] = []
    for coords, peak in candidates:
        x0, y0, x1, y1 = coords
        area = (x1 - x0) * (y1 - y0)
        contained = False
        for (kx0, ky0, kx1, ky1), _ in kept:
            iw = min(x1, kx1) - max(x0, kx0)
            ih = min(y1, ky1) - max(y0, ky0)
            if iw <= 0 or ih <= 0:
                continue
            overlap = iw * ih
            if overlap / min(area, (kx1 - kx0) * (ky1 - ky0)) > 0.6:
                contained = True
                break
        if not contained:
            kept.append((coords, peak))

    max_peak = max(peak for _, peak in kept)
    boxes = [BoundingBox(x0, y0, x1, y1, confidence=peak / max_peak)
             for (x0, y0, x1, y1), peak in kept]
    return nms(boxes, nms_iou)


class _DetectorNet(nn.Module):
    """Patchify stem + small conv trunk; head predicts (objectness, dx, dy, dw, dh)
    per anchor on a stride-8 grid."""

    def __init__(self, n_anchors: int):
        super().__init__()
        self.stem = nn.Conv2d(3, 24, kernel_size=_STEM_STRIDE, stride=_STEM_STRIDE)
        self.trunk = nn.Sequential(
            nn.ReLU(inplace=True),
            nn.Conv2d(24, 48, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(48, 48, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(48, n_anchors * 5, 3, padding=1)
        self.n_anchors = n_anchors

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.head(self.trunk(self.stem(x)))
        b, _, gh, gw = out.shape
        return out.view(b, self.n_anchors, 5, gh, gw)


def _anchor_grid(grid_h: int, grid_w: int, anchor_sizes: Sequence[int]) -> np.ndarray:
    """(A, grid_h, grid_w, 4) anchor boxes (x0, y0, x1, y1) in tile coordinates."""
    cx = (np.arange(grid_w) + 0.5) * _STEM_STRIDE
    cy = (np.arange(grid_h) + 0.5) * _STEM_STRIDE
    cxg, cyg = np.meshgrid(cx, cy)  # (gh, gw)
    anchors = np.empty((len(anchor_sizes), grid_h, grid_w, 4), dtype=np.float64)
    for a, size in enumerate(anchor_sizes):
        half = size / 2.0
        anchors[a, ..., 0] = cxg - half
        anchors[a, ..., 1] = cyg - half
        anchors[a, ..., 2] = cxg + half
        anchors[a, ..., 3] = cyg + half
    return anchors


def _pairwise_iou(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """IoU matrix (N, G) for (N, 4) anchors vs (G, 4) ground-truth boxes."""
    ix0 = np.maximum(anchors[:, None, 0], gts[None, :, 0])
    iy0 = np.maximum(anchors[:, None, 1], gts[None, :, 1])
    ix1 = np.minimum(anchors[:, None, 2], gts[None, :, 2])
    iy1 = np.minimum(anchors[:, None, 3], gts[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    return inter / (area_a[:, None] + area_g[None, :] - inter)


def _assign_targets(gt_boxes: Sequence[BoundingBox], grid_h: int, grid_w: int,
                    anchor_sizes: Sequence[int], pos_iou: float, neg_iou: float):
    """Per-anchor objectness target (1 pos / 0 neg / -1 ignore) and offsets."""
    n = len(anchor_sizes) * grid_h * grid_w
    obj = np.zeros(n, dtype=np.float32)
    offsets = np.zeros((n, 4), dtype=np.float32)
    anchors = _anchor_grid(grid_h, grid_w, anchor_sizes).reshape(n, 4)
    if not gt_boxes:
        return obj, offsets, np.zeros(n, dtype=bool)
    gts = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in gt_boxes])
    ious = _pairwise_iou(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    pos = best_iou >= pos_iou
    ignore = (best_iou >= neg_iou) & ~pos
    # force-match the best anchor for every ground truth
    for g in range(len(gt_boxes)):
        a = int(ious[:, g].argmax())
        pos[a] = True
        best_gt[a] = g
    obj[pos] = 1.0
    obj[ignore & ~pos] = -1.0
    matched = gts[best_gt[pos]]
    aw = anchors[pos, 2] - anchors[pos, 0]
    ah = anchors[pos, 3] - anchors[pos, 1]
    acx = 0.5 * (anchors[pos, 0] + anchors[pos, 2])
    acy = 0.5 * (anchors[pos, 1] + anchors[pos, 3])
    gcx = 0.5 * (matched[:, 0] + matched[:, 2])
    gcy = 0.5 * (matched[:, 1] + matched[:, 3])
    gw = matched[:, 2] - matched[:, 0]
    gh = matched[:, 3] - matched[:, 1]
    offsets[pos, 0] = (gcx - acx) / aw
    offsets[pos, 1] = (gcy - acy) / ah
    offsets[pos, 2] = np.log(gw / aw)
    offsets[pos, 3] = np.log(gh / ah)
    return obj, offsets, pos


def _tiles_to_tensor(tiles: Sequence[Tile | np.ndarray]) -> torch.Tensor:
    stack = np.stack([_tile_pixels(t) for t in tiles]).astype(np.float32) / 255.0
    return torch.from_numpy(stack).permute(0, 3, 1, 2)


def train_neural_detector(
    tiles: Sequence[tuple[Tile | np.ndarray, Sequence[BoundingBox]]],
    config: DetectorTrainConfig = DetectorTrainConfig(),
) -> DetectorModel:
    """Train the anchor-based detector on labelled tiles.

    Objectness uses binary cross-entropy with hard-negative mining
    (config.neg_ratio negatives per positive anchor); box offsets use
    smooth-L1 on positive anchors. Deterministic given config.seed.
    """
    if not tiles:
        raise ValueError("empty training set")
    if not any(len(boxes) > 0 for _, boxes in tiles):
        raise ValueError("training set has zero positive boxes")
    side = _tile_pixels(tiles[0][0]).shape[0]
    if side % _STEM_STRIDE:
        raise ValueError(f"tile side {side} not a multiple of stride {_STEM_STRIDE}")
    grid = side // _STEM_STRIDE

    torch.manual_seed(config.seed)
    net = _DetectorNet(len(config.anchor_sizes))
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)

    x = _tiles_to_tensor([t for t, _ in tiles])
    targets = [_assign_targets(list(boxes), grid, grid, config.anchor_sizes,
                               config.pos_iou, config.neg_iou)
               for _, boxes in tiles]
    obj_t = torch.from_numpy(np.stack([t[0] for t in targets])).view(len(tiles), -1)
    off_t = torch.from_numpy(np.stack([t[1] for t in targets])).view(len(tiles), -1, 4)

    rng = np.random.default_rng(config.seed)
    n = len(tiles)
    epoch_losses: list[float] = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            out = net(x[idx])  # (B, A, 5, g, g)
            b = out.shape[0]
            logits = out[:, :, 0].reshape(b, -1)
            offsets = out[:, :, 1:].permute(0, 1, 3, 4, 2).reshape(b, -1, 4)
            obj = obj_t[idx]
            off = off_t[idx]

            pos = obj == 1.0
            neg = obj == 0.0
            bce = nn.functional.binary_cross_entropy_with_logits(
                logits, pos.float(), reduction="none")
            n_pos = int(pos.sum())
            n_hard = max(config.neg_ratio * n_pos, 32)
            neg_losses = bce[neg]
            if neg_losses.numel() > n_hard:
                neg_losses, _ = torch.topk(neg_losses, n_hard)
            obj_loss = (bce[pos].sum() + neg_losses.sum()) / max(n_pos + neg_losses.numel(), 1)
            if n_pos:
                box_loss = nn.functional.smooth_l1_loss(offsets[pos], off[pos])
            else:
                box_loss = torch.zeros(())
            loss = obj_loss + config.box_loss_weight * box_loss
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * b
        epoch_losses.append(total / n)

    net.eval()
    return DetectorModel(
        kind="neural",
        confidence_threshold=config.confidence_threshold,
        net=net,
        anchor_sizes=tuple(config.anchor_sizes),
        training_config=dataclasses.asdict(config),
        training_summary={"epoch_losses": epoch_losses,
                          "first_loss": epoch_losses[0], "final_loss": epoch_losses[-1]},
    )


def _neural_detect(model: DetectorModel, pixels: np.ndarray, nms_iou: float) -> list[BoundingBox]:
    side_h, side_w = pixels.shape[:2]
    if side_h % _STEM_STRIDE or side_w % _STEM_STRIDE:
        raise ValueError(f"tile shape {pixels.shape[:2]} not a multiple of {_STEM_STRIDE}")
    x = _tiles_to_tensor([pixels])
    with torch.no_grad():
        out = model.net(x)[0]  # (A, 5, gh, gw)
    gh, gw = out.shape[2], out.shape[3]
    scores = torch.sigmoid(out[:, 0]).numpy().ravel()
    deltas = out[:, 1:].permute(0, 2, 3, 1).reshape(-1, 4).numpy()
    anchors = _anchor_grid(gh, gw, model.anchor_sizes).reshape(-1, 4)

    keep = scores >= model.confidence_threshold
    if not keep.any():
        return []
    anchors, deltas, scores = anchors[keep], deltas[keep], scores[keep]
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    acy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -4.0, 4.0))
    h = ah * np.exp(np.clip(deltas[:, 3], -4.0, 4.0))
    boxes = []
    for i in range(len(scores)):
        x0 = float(np.clip(cx[i] - w[i] / 2, 0, side_w - 1))
        y0 = float(np.clip(cy[i] - h[i] / 2, 0, side_h - 1))
        x1 = float(np.clip(cx[i] + w[i] / 2, x0 + 1e-3, side_w))
        y1 = float(np.clip(cy[i] + h[i] / 2, y0 + 1e-3, side_h))
        boxes.append(BoundingBox(x0, y0, x1, y1, confidence=float(scores[i])))
    return nms(boxes, nms_iou)


def detect_tile(model: DetectorModel, tile: Tile | np.ndarray,
                nms_iou: float = 0.45) -> list[BoundingBox]:
    """Boxes (tile coordinates) with confidence >= model.confidence_threshold."""
    pixels = _tile_pixels(tile)
    if model.kind == "classical":
        boxes = baseline_blob_detect(
            pixels, min_diameter_px=model.min_diameter_px,
            min_contrast=model.min_contrast, nms_iou=nms_iou)
        return [b for b in boxes if b.confidence >= model.confidence_threshold]
    if model.net is None:
        raise ValueError("neural detector has no loaded weights")
    return _neural_detect(model, pixels, nms_iou)


def detection_recall(
    model: DetectorModel,
    labelled_tiles: Sequence[tuple[Tile | np.ndarray, Sequence[BoundingBox]]],
    iou_floor: float = 0.3,
) -> float:
    """Fraction of ground-truth boxes matched 1:1 by a detection at IoU >= floor."""
    hits = total = 0
    for tile, gt_boxes in labelled_tiles:
        detections = detect_tile(model, tile)
        used = [False] * len(detections)
        for gt in gt_boxes:
            total += 1
            best, best_i = 0.0, -1
            for i, det in enumerate(detections):
                if used[i]:
                    continue
                v = iou(gt, det)
                if v > best:
                    best, best_i = v, i
            if best >= iou_floor:
                hits += 1
                used[best_i] = True
    if total == 0:
        raise ValueError("no ground-truth boxes to evaluate")
    return hits / total


def crop_lesion(image: WideFieldImage, box: BoundingBox, crop_size: int = 64,
                lesion_id: int = 0) -> LesionCrop:
    """Cut a crop_size window centered on the box center, reflect-padded at
    image edges. Boxes larger than the window are enlarged by 10% and
    downsampled (area averaging) so the full silhouette survives.
    """
    cx, cy = box.center
    longer = max(box.width, box.height)
    if longer > crop_size:
        side = int(np.ceil(1.1 * longer))
        x0 = int(round(cx)) - side // 2
        y0 = int(round(cy)) - side // 2
        window = reflect_window(image.pixels, x0, y0, side, side)
        from PIL import Image

        resized = Image.fromarray(window).resize((crop_size, crop_size), Image.BOX)
        pixels = np.asarray(resized, dtype=np.uint8)
    else:
        half = crop_size // 2
        x0 = int(round(cx)) - half
        y0 = int(round(cy)) - half
        pixels = np.ascontiguousarray(
            reflect_window(image.pixels, x0, y0, crop_size, crop_size))
    return LesionCrop(lesion_id=lesion_id, pixels=pixels, source_box=box,
                      center=(float(cx), float(cy)))


def save_detector(model: DetectorModel, path: str | Path) -> None:
    """Single checkpoint file plus a JSON sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": model.kind,
        "crop_size": model.crop_size,
        "confidence_threshold": model.confidence_threshold,
        "anchor_sizes": list(model.anchor_sizes),
        "min_diameter_px": model.min_diameter_px,
        "min_contrast": model.min_contrast,
        "state_dict": model.net.state_dict() if model.net is not None else None,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }
    torch.save(payload, path)
    sidecar = {
        "kind": model.kind,
        "crop_size": model.crop_size,
        "confidence_threshold": model.confidence_threshold,
        "training_config": model.training_config,
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_detector(path: str | Path) -> DetectorModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"detector checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        kind = payload["kind"]
    except Exception as exc:  # corrupt file
        raise ValueError(f"unreadable detector checkpoint {path}: {exc}") from exc
    net = None
    if payload["state_dict"] is not None:
        net = _DetectorNet(len(payload["anchor_sizes"]))
        net.load_state_dict(payload["state_dict"])
        net.eval()
    return DetectorModel(
        kind=kind,
        confidence_threshold=payload["confidence_threshold"],
        crop_size=payload["crop_size"],
        net=net,
        anchor_sizes=tuple(payload["anchor_sizes"]),
        min_diameter_px=payload["min_diameter_px"],
        min_contrast=payload["min_contrast"],
    )
