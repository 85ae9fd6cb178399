"""MC-dropout sampling and per-pixel uncertainty maps.

Each sigmoid plane is treated as an independent Bernoulli variable
(foreground / background), so the class sum in both entropy terms runs over
{p, 1 - p} for heart and lungs separately. Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .model import BayesianFPN
from .nn import LayerMode, RngStream

LN2 = float(np.log(2.0))


@dataclass
class McSampleStack:
    samples: np.ndarray  # (T, 2, H, W) probabilities, float64
    seed: int
    counters: tuple[int, ...]

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 4 or s.shape[0] < 1:
            raise ValueError(f"stack must be (T, C, H, W) with T >= 1, got {s.shape}")
        if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
            raise ValueError("stack values must be probabilities")
        self.samples = s

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    def prefix(self, t: int) -> McSampleStack:
        """The stack ``mc_sample`` would have produced with ``T = t``."""
        return McSampleStack(self.samples[:t], self.seed, self.counters[:t])


@dataclass
class UncertaintyReport:
    mean_mask: np.ndarray
    entropy: np.ndarray
    mutual_info: np.ndarray
    entropy_sum: np.ndarray
    mi_sum: np.ndarray


def mc_sample_batch(model: BayesianFPN, images: np.ndarray, T: int, seed: int,
                    batch_size: int = 32) -> list[McSampleStack]:
    """T stochastic passes over a batch of images; pass t uses RNG counter t.

    Dropout masks are drawn for the whole chunk at once, so an image's
    samples depend on its position within ``images`` (and on ``batch_size``).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = np.empty((T, len(images), 2) + images.shape[2:], dtype=np.float64)
    for t in range(T):
        out[t] = model.predict(images, LayerMode.MC, RngStream(seed, t), batch_size=batch_size)
    counters = tuple(range(T))
    return [McSampleStack(np.ascontiguousarray(out[:, i]), seed, counters) for i in range(len(images))]


def mc_sample(model: BayesianFPN, image: np.ndarray, T: int = 20, seed: int = 0) -> McSampleStack:
    image = np.asarray(image)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError("mc_sample takes a single image; use mc_sample_batch")
        image = image[0]
    return mc_sample_batch(model, image[None], T, seed)[0]


def _ordered_mean(values: np.ndarray) -> np.ndarray:
    """Mean over axis 0, summed in sorted order so any permutation gives identical bits."""
    v = np.sort(values, axis=0)
    acc = v[0].copy()
    for row in v[1:]:
        acc += row
    return acc / v.shape[0]


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))


def _samples(stack) -> np.ndarray:
    return stack.samples if isinstance(stack, McSampleStack) else np.asarray(stack, dtype=np.float64)


def mean_mask(stack) -> np.ndarray:
    return _ordered_mean(_samples(stack))


def predictive_entropy(stack) -> np.ndarray:
    return binary_entropy(mean_mask(stack))


def _mi(ent: np.ndarray, samples: np.ndarray) -> np.ndarray:
    # exact value lies in [0, H]; clamp the last-bit rounding that can leave it outside
    return np.clip(ent - _ordered_mean(binary_entropy(samples)), 0.0, ent)


def mutual_information(stack) -> np.ndarray:
    """Predictive entropy minus the mean per-sample entropy."""
    s = _samples(stack)
    return _mi(binary_entropy(_ordered_mean(s)), s)


def report(stack) -> UncertaintyReport:
    s = _samples(stack)
    mean = _ordered_mean(s)
    ent = binary_entropy(mean)
    mi = _mi(ent, s)
    return UncertaintyReport(mean, ent, mi, ent[0] + ent[1], mi[0] + mi[1])


def to_uint8(map_: np.ndarray, full_scale: float = LN2) -> np.ndarray:
    """Linear 8-bit rendering: 0 -> 0, ``full_scale`` -> 255, clipped."""
    return np.round(np.clip(np.asarray(map_) / full_scale, 0.0, 1.0) * 255).astype(np.uint8)
