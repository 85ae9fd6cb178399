"""Cardiothoracic ratio from binary masks, and its MC-dropout distribution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import HEART, LUNGS


class EmptyMaskError(ValueError):
    def __init__(self, which: str):
        super().__init__(f"empty {which} mask")
        self.which = which


class CtrEstimationError(RuntimeError):
    """Every MC sample produced an empty mask."""


@dataclass(frozen=True)
class CtrMeasurement:
    heart_width: int
    lung_width: int
    heart_span: tuple[int, int]
    lung_span: tuple[int, int]

    @property
    def ctr(self) -> float:
        return self.heart_width / self.lung_width


@dataclass
class CtrEstimate:
    per_sample: list[CtrMeasurement | None]
    values: np.ndarray
    mean: float
    std: float
    bounds: tuple[float, float]
    flagged: int = 0
    flagged_reasons: list[str] = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.bounds[1] - self.bounds[0]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def column_span(mask: np.ndarray) -> tuple[int, int] | None:
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    if cols.size == 0:
        return None
    return int(cols[0]), int(cols[-1])


def measure_ctr(heart_mask: np.ndarray, lungs_mask: np.ndarray) -> CtrMeasurement:
    """Ratio of horizontal extents: (heart max col - min col + 1) / (lungs likewise)."""
    heart_mask = np.asarray(heart_mask)
    lungs_mask = np.asarray(lungs_mask)
    if heart_mask.shape != lungs_mask.shape or heart_mask.ndim != 2:
        raise ValueError("masks must be 2-d with identical shapes")
    hs = column_span(heart_mask)
    if hs is None:
        raise EmptyMaskError("heart")
    ls = column_span(lungs_mask)
    if ls is None:
        raise EmptyMaskError("lungs")
    return CtrMeasurement(hs[1] - hs[0] + 1, ls[1] - ls[0] + 1, hs, ls)


def ctr_statistics(values) -> tuple[float, float, tuple[float, float]]:
    """Mean, sample std (n-1; 0 for a single value) and 2.5/97.5 percentiles."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no CTR values")
    if values.min() == values.max():
        # np.mean of n equal values need not return that value exactly
        v = float(values[0])
        return v, 0.0, (v, v)
    std = float(np.std(values, ddof=1))
    low, high = np.percentile(values, [2.5, 97.5])
    return float(np.mean(values)), std, (float(low), float(high))


def estimate_ctr(samples: np.ndarray, threshold: float = 0.5) -> CtrEstimate:
    """Per-sample CTR over a (T, 2, H, W) probability stack.

    Samples with an empty heart or lungs mask are excluded and counted.
    """
    samples = getattr(samples, "samples", samples)
    per_sample: list[CtrMeasurement | None] = []
    reasons = []
    for probs in samples:
        try:
            per_sample.append(measure_ctr(binarize(probs[HEART], threshold), binarize(probs[LUNGS], threshold)))
        except EmptyMaskError as err:
            per_sample.append(None)
            reasons.append(err.which)
    values = np.array([m.ctr for m in per_sample if m is not None])
    if values.size == 0:
        raise CtrEstimationError(f"all {len(per_sample)} samples have empty masks")
    mean, std, bounds = ctr_statistics(values)
    return CtrEstimate(per_sample, values, mean, std, bounds, flagged=len(reasons), flagged_reasons=reasons)


def ground_truth_ctr(sample) -> float:
    return measure_ctr(sample.heart_mask, sample.lungs_mask).ctr
