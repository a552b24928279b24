"""Seeded synthetic wide-field patients with planted ugly-duckling outliers.

Each patient gets a skin-textured background and a set of non-overlapping
lesions drawn from one patient-specific appearance distribution; outliers are
the same lesion model with parameters shifted (darker/redder, larger,
more irregular). Ground truth is exact: tight boxes, binary masks, labels,
and the sampled generator parameters, so every downstream module can be
verified without learned components in the loop.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tiling import BoundingBox, WideFieldImage

SKIN_BASE = np.array([205.0, 165.0, 145.0])
LESION_BASE = np.array([95.0, 62.0, 50.0])

LABEL_COMMON = "common"
LABEL_UD = "ud"

TRUTH_CSV_HEADER = ["patient_id", "lesion_id", "label"]
TRUTH_BOXES_HEADER = ["patient_id", "lesion_id", "x_min", "y_min", "x_max", "y_max"]


@dataclass(frozen=True)
class OutlierShift:
    """Strength of the parameter shift applied to planted outliers.

    color_delta is in 8-bit units along a dark or reddish direction,
    size_factor multiplies the patient's mean diameter, irregularity adds
    border wobble on top of the common lesions' 0.06 baseline.
    """

    color_delta: float = 45.0
    size_factor: float = 1.6
    irregularity: float = 0.5

    def scaled(self, factor: float) -> "OutlierShift":
        return OutlierShift(
            color_delta=self.color_delta * factor,
            size_factor=1.0 + (self.size_factor - 1.0) * factor,
            irregularity=self.irregularity * factor,
        )


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: tuple[int, int] = (1640, 1116)  # (W, H)
    n_common: int = 50
    n_outliers: int = 1
    lesion_diameter_px: tuple[float, float] = (8.0, 60.0)
    outlier_shift: OutlierShift = OutlierShift()
    noise_sigma: float = 2.5
    blotch_amplitude: float = 10.0

    def __post_init__(self) -> None:
        if self.n_common < 2:
            raise ValueError(f"n_common must be >= 2, got {self.n_common}")
        if self.n_outliers < 0:
            raise ValueError(f"n_outliers must be >= 0, got {self.n_outliers}")
        w, h = self.image_size
        if w < 64 or h < 64:
            raise ValueError(f"image_size too small: {self.image_size}")
        lo, hi = self.lesion_diameter_px
        if not (3.0 <= lo <= hi):
            raise ValueError(f"bad diameter range {self.lesion_diameter_px}")

    @property
    def patient_id(self) -> str:
        return f"synth-{self.seed:06d}"


@dataclass
class SynthGroundTruth:
    """Exact per-lesion ground truth; lesion_id indexes into boxes."""

    patient_id: str
    boxes: list[BoundingBox]
    labels: dict[int, str]
    # lesion_id -> ((origin_y, origin_x), local boolean mask)
    masks: dict[int, tuple[tuple[int, int], np.ndarray]]
    # sampled generator parameters per lesion (color, diameter, irregularity, ellipticity)
    params: dict[int, dict] = field(default_factory=dict)

    def mask_window(self, lesion_id: int, x0: int, y0: int, size: int) -> np.ndarray:
        """Boolean (size, size) window of this lesion's mask at full-image (x0, y0)."""
        window = np.zeros((size, size), dtype=bool)
        (oy, ox), local = self.masks[lesion_id]
        mh, mw = local.shape
        gy0, gy1 = max(y0, oy), min(y0 + size, oy + mh)
        gx0, gx1 = max(x0, ox), min(x0 + size, ox + mw)
        if gy0 < gy1 and gx0 < gx1:
            window[gy0 - y0:gy1 - y0, gx0 - x0:gx1 - x0] = \
                local[gy0 - oy:gy1 - oy, gx0 - ox:gx1 - ox]
        return window


def _background(rng: np.random.Generator, w: int, h: int,
                noise_sigma: float, blotch_amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = SKIN_BASE + rng.uniform(-18, 18, 3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    # smooth directional tone gradient
    phi = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(5, 15)
    ramp = np.cos(phi) * xx / max(w, 1) + np.sin(phi) * yy / max(h, 1)
    img += (amp * (ramp - ramp.mean()))[..., None]
    # low-frequency blotches
    for _ in range(6):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        sig = rng.uniform(80, 250)
        a = rng.uniform(-blotch_amplitude, blotch_amplitude)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
        img += a * bump[..., None] * np.array([1.0, 0.95, 0.9])
    img += rng.normal(0, noise_sigma, (h, w, 3))
    return img


def _radial_profile(rng: np.random.Generator, diameter: float, ellipticity: float,
                    irregularity: float, n_theta: int = 720):
    """Lesion border radius as a function of angle: rotated ellipse x harmonic wobble."""
    a = diameter / 2.0
    b = a * ellipticity
    rot = rng.uniform(0, np.pi)
    theta = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    tp = theta - rot
    r = (a * b) / np.sqrt((b * np.cos(tp)) ** 2 + (a * np.sin(tp)) ** 2)
    wobble = np.zeros_like(theta)
    for harmonic in range(2, 7):
        c = irregularity * rng.uniform(0.04, 0.16)
        wobble += c * np.sin(harmonic * theta + rng.uniform(0, 2 * np.pi))
    return theta, r * np.clip(1.0 + wobble, 0.5, 1.6)


def _render_lesion(rng: np.random.Generator, img: np.ndarray, cx: float, cy: float,
                   diameter: float, ellipticity: float, irregularity: float,
                   color: np.ndarray):
    h, w = img.shape[:2]
    pad = int(np.ceil(diameter * 0.95)) + 4
    x0, x1 = int(np.floor(cx)) - pad, int(np.floor(cx)) + pad + 1
    y0, y1 = int(np.floor(cy)) - pad, int(np.floor(cy)) + pad + 1
    x0c, x1c = max(0, x0), min(w, x1)
    y0c, y1c = max(0, y0), min(h, y1)
    yy, xx = np.mgrid[y0c:y1c, x0c:x1c].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    rho = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx) % (2 * np.pi)
    theta, rprof = _radial_profile(rng, diameter, ellipticity, irregularity)
    border = np.interp(ang, theta, rprof, period=2 * np.pi)
    alpha = np.clip((border - rho) / 1.2 + 0.5, 0.0, 1.0)  # ~1.2 px feathered edge
    lesion_color = color + rng.normal(0, 5, 3)
    shade = 1.0 - 0.18 * np.clip(1 - (rho / np.maximum(border, 1e-9)) ** 2, 0, 1)
    patch = lesion_color[None, None, :] * shade[..., None] + rng.normal(0, 3, alpha.shape + (3,))
    region = img[y0c:y1c, x0c:x1c, :]
    img[y0c:y1c, x0c:x1c, :] = alpha[..., None] * patch + (1 - alpha[..., None]) * region
    mask = alpha >= 0.5
    ys, xs = np.nonzero(mask)
    box = BoundingBox(
        x_min=float(x0c + xs.min()), y_min=float(y0c + ys.min()),
        x_max=float(x0c + xs.max() + 1), y_max=float(y0c + ys.max() + 1),
    )
    return mask, (y0c, x0c), box


def generate_patient(config: SynthConfig) -> tuple[WideFieldImage, SynthGroundTruth]:
    """Deterministically render one synthetic patient and its exact ground truth.

    Raises RuntimeError when the requested lesion count cannot be placed
    without overlap (the fix is a larger image or fewer lesions).
    """
    rng = np.random.default_rng(config.seed)
    w, h = config.image_size
    img = _background(rng, w, h, config.noise_sigma, config.blotch_amplitude)

    dmin, dmax = config.lesion_diameter_px
    mean_color = LESION_BASE + rng.uniform(-18, 18, 3)
    mean_diam = rng.uniform(dmin + 6, max(dmin + 7, min(30.0, dmax * 0.5)))
    mean_ell = rng.uniform(0.78, 0.95)
    shift = config.outlier_shift
    # outliers drift either toward dark or toward red, per patient
    direction = np.array([-1.0, -1.0, -1.0]) if rng.choice(2) == 0 \
        else np.array([0.9, -0.5, -0.5])

    def common_ell() -> float:
        return float(np.clip(mean_ell + rng.normal(0.0, 0.05), 0.60, 1.0))

    specs = []
    for _ in range(config.n_common):
        # log-normal size ratio and a tight ellipticity band around the
        # patient's means: one individual's moles cluster in size and
        # shape, with thin tails, not a flat spread
        d = float(np.clip(mean_diam * np.exp(rng.normal(0.0, 0.12)), dmin, dmax))
        specs.append(dict(diameter=d, ellipticity=common_ell(),
                          irregularity=0.06, color=mean_color, label=LABEL_COMMON))
    for _ in range(config.n_outliers):
        d = float(np.clip(mean_diam * shift.size_factor * rng.uniform(0.9, 1.15), dmin, dmax))
        specs.append(dict(diameter=d, ellipticity=common_ell(),
                          irregularity=0.06 + shift.irregularity,
                          color=mean_color + direction * shift.color_delta,
                          label=LABEL_UD))

    # place large-first to ease packing; ids keep spec order (outliers last)
    order = sorted(range(len(specs)), key=lambda i: -specs[i]["diameter"])
    placed: list[tuple[float, float, float]] = []
    centers: dict[int, tuple[float, float]] = {}
    for i in order:
        # circle that provably contains the rendered mask, plus margin
        radius = specs[i]["diameter"] * 0.8 + 6
        if 2 * radius >= min(w, h):
            raise RuntimeError(
                f"lesion of diameter {specs[i]['diameter']:.0f}px does not fit a "
                f"{w}x{h} image; use a larger image")
        for _ in range(400):
            cx = rng.uniform(radius, w - radius)
            cy = rng.uniform(radius, h - radius)
            if all(np.hypot(cx - px, cy - py) > radius + pr + 3 for px, py, pr in placed):
                placed.append((cx, cy, radius))
                centers[i] = (cx, cy)
                break
        else:
            raise RuntimeError(
                f"could not place {len(specs)} non-overlapping lesions in a "
                f"{w}x{h} image; use a larger image or fewer lesions")

    boxes: list[BoundingBox] = []
    labels: dict[int, str] = {}
    masks: dict[int, tuple[tuple[int, int], np.ndarray]] = {}
    params: dict[int, dict] = {}
    for i, spec in enumerate(specs):
        cx, cy = centers[i]
        mask, origin, box = _render_lesion(
            rng, img, cx, cy, spec["diameter"], spec["ellipticity"],
            spec["irregularity"], spec["color"])
        boxes.append(box)
        labels[i] = spec["label"]
        masks[i] = (origin, mask)
        params[i] = dict(color=tuple(np.asarray(spec["color"], dtype=float)),
                         diameter=spec["diameter"],
                         irregularity=spec["irregularity"],
                         ellipticity=spec["ellipticity"])

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    image = WideFieldImage(pixels=pixels, patient_id=config.patient_id)
    truth = SynthGroundTruth(patient_id=config.patient_id, boxes=boxes,
                             labels=labels, masks=masks, params=params)
    return image, truth


def parameter_separation(truth: SynthGroundTruth) -> float:
    """Mean Euclidean distance in generator-parameter space (RGB, diameter,
    irregularity) from each outlier to the common-lesion centroid.

    Returns 0.0 when the patient has no outliers.
    """
    def vec(p):
        return np.array([*p["color"], p["diameter"], p["irregularity"]], dtype=float)

    common = [vec(truth.params[i]) for i, l in truth.labels.items() if l == LABEL_COMMON]
    uds = [vec(truth.params[i]) for i, l in truth.labels.items() if l == LABEL_UD]
    if not uds:
        return 0.0
    centroid = np.mean(common, axis=0)
    return float(np.mean([np.linalg.norm(u - centroid) for u in uds]))


def corpus_plan(
    n_patients: int,
    base_seed: int,
    template: SynthConfig = SynthConfig(),
    ud_free_fraction: float = 22.0 / 75.0,
    n_common_range: tuple[int, int] = (10, 120),
    n_outlier_range: tuple[int, int] = (1, 2),
) -> list[SynthConfig]:
    """Per-patient configs for a corpus: seeds base_seed + index, lesion counts
    drawn from the given ranges, and an exact round(ud_free_fraction * n)
    share of patients with zero outliers (selected by a seeded permutation).
    """
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    if not (0.0 <= ud_free_fraction <= 1.0):
        raise ValueError(f"ud_free_fraction must be in [0, 1], got {ud_free_fraction}")
    # corpus-level stream, distinct from the per-patient default_rng(seed) streams
    rng = np.random.default_rng([base_seed, 0xC0])
    n_free = int(round(ud_free_fraction * n_patients))
    free = set(rng.permutation(n_patients)[:n_free].tolist())
    configs = []
    for i in range(n_patients):
        n_common = int(rng.integers(n_common_range[0], n_common_range[1] + 1))
        n_out = 0 if i in free else int(rng.integers(n_outlier_range[0], n_outlier_range[1] + 1))
        configs.append(dataclasses.replace(
            template, seed=base_seed + i, n_common=n_common, n_outliers=n_out))
    return configs


def generate_corpus(
    n_patients: int,
    base_seed: int,
    template: SynthConfig = SynthConfig(),
    **plan_kwargs,
) -> list[tuple[WideFieldImage, SynthGroundTruth]]:
    return [generate_patient(c)
            for c in corpus_plan(n_patients, base_seed, template, **plan_kwargs)]


def generate_training_pair(rng: np.random.Generator, with_lesion: bool = True,
                           size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """One (crop, mask) training pair for the segmenter.

    Lesion colors cover a wide band around the lesion base color so the
    segmenter generalizes across patients and across outlier shifts.
    """
    base = SKIN_BASE + rng.uniform(-25, 25, 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phi = rng.uniform(0, 2 * np.pi)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += (rng.uniform(3, 12) * ((np.cos(phi) * xx + np.sin(phi) * yy) / size))[..., None]
    img += rng.normal(0, rng.uniform(1.5, 3.5), (size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    if with_lesion:
        color = LESION_BASE + rng.uniform(-35, 55, 3)
        d = rng.uniform(8, 52)
        cx = size / 2 + rng.uniform(-6, 6)
        cy = size / 2 + rng.uniform(-6, 6)
        theta, rprof = _radial_profile(rng, d, rng.uniform(0.7, 1.0), rng.uniform(0.04, 0.6))
        dx, dy = xx - cx, yy - cy
        rho = np.hypot(dx, dy)
        ang = np.arctan2(dy, dx) % (2 * np.pi)
        border = np.interp(ang, theta, rprof, period=2 * np.pi)
        alpha = np.clip((border - rho) / 1.2 + 0.5, 0, 1)
        lcol = color + rng.normal(0, 5, 3)
        shade = 1.0 - 0.18 * np.clip(1 - (rho / np.maximum(border, 1e-9)) ** 2, 0, 1)
        patch = lcol[None, None, :] * shade[..., None] + rng.normal(0, 3, (size, size, 3))
        img = alpha[..., None] * patch + (1 - alpha[..., None]) * img
        mask = alpha >= 0.5
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def generate_training_crops(n_positives: int, n_negatives: int, seed: int = 0,
                            size: int = 64):
    """(positives, negatives) for segmenter training: (crop, mask) pairs and
    skin-only crops."""
    rng = np.random.default_rng(seed)
    positives = [generate_training_pair(rng, True, size) for _ in range(n_positives)]
    negatives = [generate_training_pair(rng, False, size)[0] for _ in range(n_negatives)]
    return positives, negatives


def write_patient(out_dir: str | Path, image: WideFieldImage,
                  truth: SynthGroundTruth) -> dict[str, str]:
    """Write one patient's PNG and mask archive; returns written paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"{image.patient_id}.png"
    Image.fromarray(image.pixels).save(png_path)
    arrays = {}
    for lesion_id, (origin, mask) in truth.masks.items():
        arrays[f"mask_{lesion_id}"] = mask
        arrays[f"origin_{lesion_id}"] = np.asarray(origin, dtype=np.int64)
    npz_path = out_dir / f"{image.patient_id}_masks.npz"
    np.savez_compressed(npz_path, **arrays)
    return {"image": str(png_path), "masks": str(npz_path)}


def write_corpus(out_dir: str | Path,
                 pairs: Sequence[tuple[WideFieldImage, SynthGroundTruth]]) -> dict[str, str]:
    """Write PNGs, mask archives, the ground-truth CSV, and a boxes CSV that
    lets the evaluator match detector output back to reference lesions."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image, truth in pairs:
        write_patient(out_dir, image, truth)
    truth_path = out_dir / "truth.csv"
    with open(truth_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_CSV_HEADER)
        for _, truth in pairs:
            for lesion_id in sorted(truth.labels):
                writer.writerow([truth.patient_id, lesion_id, truth.labels[lesion_id]])
    boxes_path = out_dir / "truth_boxes.csv"
    with open(boxes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_BOXES_HEADER)
        for _, truth in pairs:
            for lesion_id in sorted(truth.labels):
                b = truth.boxes[lesion_id]
                writer.writerow([truth.patient_id, lesion_id,
                                 repr(b.x_min), repr(b.y_min), repr(b.x_max), repr(b.y_max)])
    return {"truth": str(truth_path), "boxes": str(boxes_path)}
