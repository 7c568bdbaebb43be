"""Dataset loading, splitting, augmentation, weather corruption, and the
synthetic paired RGB/IR line generator.

On disk a dataset is three sibling directories with matching file names:

    root/rgb/<id>.png   8-bit 3-channel
    root/ir/<id>.png    8- or 16-bit single channel
    root/gt/<id>.png    0 / 255 binary mask

The generator draws dark anti-aliased line/catenary curves on a textured
background for the RGB view, renders the same lines bright and blurred for
the thermal view, and deliberately misregisters the thermal image by a
random sub-pixel translation so the alignment machinery has something real
to undo.  Per-image RNG streams are derived from (seed, index), so results
do not depend on generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractViolation, DataError

WEATHER_KINDS = ("day", "fog", "snow", "night")


@dataclass
class SamplePair:
    id: str
    rgb: np.ndarray   # (3, H, W) float32 in [0, 1]
    ir: np.ndarray    # (1, H, W) float32 in [0, 1]
    gt: np.ndarray    # (1, H, W) uint8 in {0, 1}


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 16
    image_size: int = 256
    lines_per_image: tuple[int, int] = (1, 4)
    line_width_px: tuple[float, float] = (1.0, 3.0)
    ir_misalignment_px: tuple[float, float] = (0.0, 4.0)
    weather: tuple[str, ...] = WEATHER_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 32:
            raise ContractViolation("image_size must be divisible by 32")
        if self.ir_misalignment_px[0] < 0:
            raise ContractViolation("ir_misalignment_px must be nonnegative")
        for kind in self.weather:
            if kind not in WEATHER_KINDS:
                raise ContractViolation(f"unknown weather kind {kind!r}")


# -- disk I/O ---------------------------------------------------------------

def _load_gray(path: Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path} is not single-channel")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32) / 65535.0


def load_dataset(root_path) -> list[SamplePair]:
    root = Path(root_path)
    ids = {}
    for sub in ("rgb", "ir", "gt"):
        d = root / sub
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
        ids[sub] = {p.stem for p in d.glob("*.png")}
    all_ids = ids["rgb"] | ids["ir"] | ids["gt"]
    orphans = sorted(i for i in all_ids
                     if not all(i in ids[s] for s in ("rgb", "ir", "gt")))
    if orphans:
        raise DataError(f"incomplete triplets for ids: {orphans}")
    pairs = []
    for sid in sorted(all_ids):
        rgb = np.asarray(Image.open(root / "rgb" / f"{sid}.png").convert("RGB"))
        rgb = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
        ir = _load_gray(root / "ir" / f"{sid}.png")[None]
        gt_raw = np.asarray(Image.open(root / "gt" / f"{sid}.png").convert("L"))
        gt = (gt_raw >= 128).astype(np.uint8)[None]
        if rgb.shape[1:] != ir.shape[1:] or rgb.shape[1:] != gt.shape[1:]:
            raise DataError(f"spatial dims differ for id {sid}")
        pairs.append(SamplePair(sid, rgb, ir, gt))
    return pairs


def save_dataset(pairs: list[SamplePair], root_path, manifest: dict | None = None) -> None:
    root = Path(root_path)
    for sub in ("rgb", "ir", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        rgb8 = np.clip(np.round(pair.rgb * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8.transpose(1, 2, 0)).save(root / "rgb" / f"{pair.id}.png")
        ir8 = np.clip(np.round(pair.ir[0] * 255), 0, 255).astype(np.uint8)
        Image.fromarray(ir8).save(root / "ir" / f"{pair.id}.png")
        Image.fromarray((pair.gt[0] * 255).astype(np.uint8)).save(
            root / "gt" / f"{pair.id}.png")
    if manifest is not None:
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")


def split(pairs: list[SamplePair], fractions=(0.70, 0.10, 0.20), seed: int = 0):
    """Seeded shuffle then contiguous cut; train absorbs rounding remainder."""
    if not pairs:
        raise ContractViolation("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation("split fractions must sum to 1")
    n = len(pairs)
    n_val = round(fractions[1] * n)
    n_test = round(fractions[2] * n)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ContractViolation("rounded split sizes exceed the dataset")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [pairs[i] for i in perm]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# -- augmentation -----------------------------------------------------------

def augment_train(pair: SamplePair, rng: np.random.Generator) -> SamplePair:
    """Joint horizontal flip plus photometric jitter on the RGB view only."""
    rgb, ir, gt = pair.rgb, pair.ir, pair.gt
    if rng.random() < 0.5:
        rgb = rgb[:, :, ::-1]
        ir = ir[:, :, ::-1]
        gt = gt[:, :, ::-1]
    brightness = rng.uniform(0.8, 1.2)
    rgb = np.clip(rgb * brightness, 0.0, 1.0)
    contrast = rng.uniform(0.8, 1.2)
    mean = rgb.mean()
    rgb = np.clip(mean + contrast * (rgb - mean), 0.0, 1.0)
    return SamplePair(pair.id, np.ascontiguousarray(rgb, dtype=np.float32),
                      np.ascontiguousarray(ir, dtype=np.float32),
                      np.ascontiguousarray(gt, dtype=np.uint8))


def weather_corrupt(rgb: np.ndarray, kind: str, severity: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Corrupt the RGB view only; the thermal view is never touched."""
    if kind not in WEATHER_KINDS:
        raise ContractViolation(f"unknown weather kind {kind!r}")
    if kind == "day":
        return rgb
    if kind == "fog":
        alpha = 0.3 + 0.5 * severity
        return (1 - alpha) * rgb + alpha
    if kind == "night":
        gamma = 1 + 2 * severity
        scale = 1 - 0.5 * severity
        return np.clip(rgb, 0.0, 1.0) ** gamma * scale
    out = rgb.copy()
    h, w = rgb.shape[1], rgb.shape[2]
    count = int(round(50 + 450 * severity))
    for _ in range(count):
        cy = rng.integers(0, h)
        cx = rng.integers(0, w)
        r = int(rng.integers(1, 3))
        y0, y1 = max(0, cy - r + 1), min(h, cy + r)
        x0, x1 = max(0, cx - r + 1), min(w, cx + r)
        out[:, y0:y1, x0:x1] = 1.0
    return out


# -- synthetic generator ----------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    acc = np.zeros((size, size), dtype=np.float32)
    weight = 1.0
    total = 0.0
    for cells in (4, 8, 16, 32):
        coarse = rng.random((cells, cells)).astype(np.float32)
        acc += weight * cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)
        total += weight
        weight *= 0.5
    # pixel-scale octave: ground clutter at the same spatial scale as the
    # lines themselves, so thin low-contrast curves do not trivially stand
    # out from an otherwise smooth background
    acc += 0.35 * rng.random((size, size)).astype(np.float32)
    total += 0.35
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / max(hi - lo, 1e-6)


def _line_coverage(rng: np.random.Generator, size: int, n_lines: int,
                   width_range: tuple[float, float]) -> np.ndarray:
    """Per-pixel coverage in [0, 1] of anti-aliased catenary curves,
    rasterized on a 4x supersampled canvas and box-downsampled."""
    ss = 4
    canvas = np.zeros((size * ss, size * ss), dtype=np.uint8)
    for _ in range(n_lines):
        side = rng.integers(0, 2)  # 0: left->right, 1: top->bottom
        if side == 0:
            p0 = np.array([rng.uniform(0, size), 0.0])
            p1 = np.array([rng.uniform(0, size), float(size)])
        else:
            p0 = np.array([0.0, rng.uniform(0, size)])
            p1 = np.array([float(size), rng.uniform(0, size)])
        sag = rng.uniform(-0.15, 0.15) * size
        t = np.linspace(0.0, 1.0, 64)
        pts_y = (1 - t) * p0[0] + t * p1[0] + sag * 4 * t * (1 - t)
        pts_x = (1 - t) * p0[1] + t * p1[1]
        pts = np.stack([pts_x, pts_y], axis=1) * ss
        width = rng.uniform(*width_range)
        cv2.polylines(canvas, [np.round(pts).astype(np.int32)], False, 255,
                      thickness=max(1, int(round(width * ss))),
                      lineType=cv2.LINE_8)
    cov = canvas.astype(np.float32) / 255.0
    cov = cov.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return cov


def _box_blur3(img: np.ndarray) -> np.ndarray:
    return cv2.blur(img, (3, 3), borderType=cv2.BORDER_REFLECT)


def generate_synthetic(config: SynthConfig) -> tuple[list[SamplePair], dict]:
    """Generate a paired dataset; returns (pairs, manifest)."""
    pairs = []
    draws = {}
    for idx in range(config.num_images):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, idx]))
        size = config.image_size
        sid = f"synth_{idx:05d}"

        n_lines = int(rng.integers(config.lines_per_image[0],
                                   config.lines_per_image[1] + 1))
        cov = _line_coverage(rng, size, n_lines, config.line_width_px)
        gt = (cov > 0.5).astype(np.uint8)[None]

        bg = 0.35 + 0.45 * _value_noise(rng, size)
        tint = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
        rgb_clean = np.clip(bg[None] * tint[:, None, None], 0.0, 1.0)
        # thin lines are only subtly darker than the terrain in RGB; the
        # thermal channel is where they stand out, so cross-modal fusion
        # (and alignment) carries real information
        depth = rng.uniform(0.05, 0.15)
        rgb_clean = np.clip(rgb_clean * (1 - depth * cov[None]), 0.0, 1.0)

        gray = rgb_clean.mean(axis=0)
        ir_img = gray * 0.6 * (1 - cov) + 1.0 * cov
        ir_img = _box_blur3(ir_img.astype(np.float32))
        m = float(ir_img.mean())
        ir_img = m + 0.6 * (ir_img - m)
        mag = rng.uniform(*config.ir_misalignment_px)
        ang = rng.uniform(0, 2 * np.pi)
        dy, dx = mag * np.sin(ang), mag * np.cos(ang)
        ir_img = ndimage.shift(ir_img, (dy, dx), order=1, mode="nearest")
        ir = np.clip(ir_img, 0.0, 1.0).astype(np.float32)[None]

        kind = config.weather[int(rng.integers(0, len(config.weather)))]
        severity = float(rng.uniform(0.2, 0.8))
        rgb = np.clip(weather_corrupt(rgb_clean, kind, severity, rng),
                      0.0, 1.0).astype(np.float32)

        draws[sid] = {"weather": kind, "severity": severity,
                      "misalignment": [float(dy), float(dx)],
                      "num_lines": n_lines}
        pairs.append(SamplePair(sid, rgb, ir, gt))

    manifest = {
        "config": {
            "num_images": config.num_images,
            "image_size": config.image_size,
            "lines_per_image": list(config.lines_per_image),
            "line_width_px": list(config.line_width_px),
            "ir_misalignment_px": list(config.ir_misalignment_px),
            "weather": list(config.weather),
            "seed": config.seed,
        },
        "images": draws,
    }
    return pairs, manifest
