"""Synthetic chest phantoms with exact heart/lung masks and known CTR."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import io
from .ctr import measure_ctr


@dataclass
class PhantomConfig:
    count: int = 200
    size: int = 64
    ctr_range: tuple[float, float] = (0.35, 0.65)
    lung_extent_range: tuple[float, float] = (0.60, 0.85)
    noise_range: tuple[float, float] = (0.01, 0.1)
    blur_prob: float = 0.5
    background_range: tuple[float, float] = (0.45, 0.60)
    lung_level_range: tuple[float, float] = (0.10, 0.30)
    heart_level_range: tuple[float, float] = (0.65, 0.85)
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        for name in ("ctr_range", "lung_extent_range", "noise_range", "background_range",
                     "lung_level_range", "heart_level_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if not (0 < self.ctr_range[0] and self.ctr_range[1] < 1):
            raise ValueError("ctr_range must lie inside (0, 1)")
        if not (0 < self.lung_extent_range[0] and self.lung_extent_range[1] <= 0.95):
            raise ValueError("lung_extent_range must lie inside (0, 0.95]")
        if self.ctr_range[0] * self.lung_extent_range[0] * self.size < 3:
            raise ValueError("infeasible geometry: smallest heart would be narrower than 3 px")


@dataclass
class PhantomSample:
    sample_id: int
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    heart_mask: np.ndarray  # (H, W) uint8
    lungs_mask: np.ndarray  # (H, W) uint8
    gt_ctr: float
    params: dict = field(default_factory=dict)

    @property
    def masks(self) -> np.ndarray:
        return np.stack([self.heart_mask, self.lungs_mask])


def ellipse_mask(size: int, left: int, width: int, center_row: int, half_height: float) -> np.ndarray:
    """Rasterized ellipse whose widest row covers exactly columns left .. left+width-1."""
    a = (width - 1) / 2 + 0.25
    x0 = left + (width - 1) / 2
    rows, cols = np.mgrid[:size, :size]
    inside = ((cols - x0) / a) ** 2 + ((rows - center_row) / half_height) ** 2 <= 1.0
    return inside.astype(np.uint8)


def _draw_geometry(cfg: PhantomConfig, rng: np.random.Generator) -> dict:
    s = cfg.size
    target_ctr = rng.uniform(*cfg.ctr_range)
    lung_w = int(round(rng.uniform(*cfg.lung_extent_range) * s))
    heart_w = max(3, int(round(target_ctr * lung_w)))
    midline = s / 2 + rng.uniform(-0.03, 0.03) * s
    lung_left = int(np.clip(round(midline - lung_w / 2), 1, s - 1 - lung_w))
    lung_right = lung_left + lung_w - 1

    lobe_w = [int(round(rng.uniform(0.54, 0.62) * lung_w)) for _ in range(2)]
    lobe_row = [int(round(rng.uniform(0.40, 0.47) * s)) for _ in range(2)]
    lobe_hh = [rng.uniform(0.26, 0.32) * s for _ in range(2)]

    offset = rng.uniform(-0.05, 0.12) * heart_w
    heart_left = int(round(midline - heart_w / 2 + offset))
    heart_left = int(np.clip(heart_left, lung_left + 1, lung_right - heart_w))
    heart_hh = rng.uniform(0.30, 0.40) * heart_w
    heart_row = int(round(np.mean(lobe_row) + rng.uniform(0.12, 0.20) * s))
    heart_row = int(min(heart_row, s - 2 - math.ceil(heart_hh)))
    return {
        "target_ctr": float(target_ctr),
        "lung_left": lung_left, "lung_width": lung_w,
        "lobe_widths": lobe_w, "lobe_rows": lobe_row, "lobe_half_heights": [float(v) for v in lobe_hh],
        "heart_left": heart_left, "heart_width": heart_w,
        "heart_row": heart_row, "heart_half_height": float(heart_hh),
        "background": float(rng.uniform(*cfg.background_range)),
        "gradient": float(rng.uniform(-0.1, 0.1)),
        "lung_level": float(rng.uniform(*cfg.lung_level_range)),
        "heart_level": float(rng.uniform(*cfg.heart_level_range)),
        "blur_sigma": float(rng.uniform(0.5, 1.2)) if rng.random() < cfg.blur_prob else 0.0,
        "noise_sigma": float(rng.uniform(*cfg.noise_range)),
    }


def rasterize(size: int, params: dict) -> tuple[np.ndarray, np.ndarray]:
    p = params
    left_lobe = ellipse_mask(size, p["lung_left"], p["lobe_widths"][0], p["lobe_rows"][0], p["lobe_half_heights"][0])
    right_left = p["lung_left"] + p["lung_width"] - p["lobe_widths"][1]
    right_lobe = ellipse_mask(size, right_left, p["lobe_widths"][1], p["lobe_rows"][1], p["lobe_half_heights"][1])
    lungs = left_lobe | right_lobe
    heart = ellipse_mask(size, p["heart_left"], p["heart_width"], p["heart_row"], p["heart_half_height"])
    return heart, lungs


def render_intensity(params: dict, heart: np.ndarray, lungs: np.ndarray) -> np.ndarray:
    """Noise-free, blur-free intensity model."""
    size = heart.shape[0]
    rows = (np.arange(size, dtype=np.float64) + 0.5) / size - 0.5
    img = np.repeat((params["background"] + params["gradient"] * rows)[:, None], size, axis=1)
    img[lungs.astype(bool)] = params["lung_level"]
    img[heart.astype(bool)] = params["heart_level"]
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so PGM round-trips are exact."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255) / 255).astype(np.float32)


def make_sample(cfg: PhantomConfig, index: int) -> PhantomSample:
    rng = np.random.default_rng([cfg.seed, index])
    params = _draw_geometry(cfg, rng)
    heart, lungs = rasterize(cfg.size, params)
    img = render_intensity(params, heart, lungs)
    if params["blur_sigma"] > 0:
        img = ndimage.gaussian_filter(img, params["blur_sigma"], mode="nearest")
    if params["noise_sigma"] > 0:
        img = img + rng.normal(0.0, params["noise_sigma"], img.shape)
    ctr = measure_ctr(heart, lungs).ctr
    return PhantomSample(index, quantize(img)[None], heart, lungs, ctr, params)


def generate(config: PhantomConfig) -> list[PhantomSample]:
    return [make_sample(config, i) for i in range(config.count)]


def split(samples: Sequence, fractions: tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([samples[i] for i in sorted(part)] for part in parts)


def as_batch(samples: Sequence[PhantomSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.masks for s in samples]).astype(np.float32)
    return images, masks


# ----------------------------------------------------------------------------
# persistence: PGM image, 2-channel u8 BTSR mask, JSON-lines metadata


def save_dataset(samples: Sequence[PhantomSample], out_dir, config: PhantomConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        stem = f"{s.sample_id:05d}"
        io.write_pgm(out / f"image_{stem}.pgm", s.image[0])
        io.save_btsr(out / f"mask_{stem}.btsr", s.masks.astype(np.uint8))
        lines.append(json.dumps({"id": s.sample_id, "gt_ctr": s.gt_ctr, "params": s.params}, sort_keys=True))
    (out / "metadata.jsonl").write_text("\n".join(lines) + "\n")
    if config is not None:
        (out / "phantom_config.json").write_text(json.dumps(asdict(config), sort_keys=True, indent=2) + "\n")
    return out


def load_dataset(data_dir) -> list[PhantomSample]:
    root = Path(data_dir)
    meta_path = root / "metadata.jsonl"
    if not meta_path.exists():
        raise FileNotFoundError(f"no metadata.jsonl in {root}")
    samples = []
    for line in meta_path.read_text().splitlines():
        if not line.strip():
            continue
        meta = json.loads(line)
        stem = f"{meta['id']:05d}"
        image = io.read_pgm(root / f"image_{stem}.pgm").astype(np.float32) / 255
        masks = io.load_btsr(root / f"mask_{stem}.btsr")
        if masks.shape != (2,) + image.shape:
            raise io.FormatError(f"mask shape {masks.shape} does not match image {image.shape}")
        samples.append(PhantomSample(meta["id"], image[None], masks[0], masks[1], meta["gt_ctr"], meta["params"]))
    return samples
