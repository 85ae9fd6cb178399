"""Segmentation / CTR metrics, bootstrap intervals and the MC-sample-count sweep."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .bayes import mc_sample_batch, mean_mask
from .ctr import CtrEstimationError, EmptyMaskError, binarize, estimate_ctr, measure_ctr


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def iou(pred, gt) -> float:
    """|A & B| / |A | B|; 1 when both masks are empty."""
    a, b = _pair(pred, gt)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(a & b) / total


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson correlation undefined for zero-variance input")
    return float(dx @ dy) / np.sqrt(sxx * syy)


def bootstrap_ci(values, B: int = 2000, level: float = 0.95, seed: int = 0,
                 statistic: Callable[[np.ndarray], float] | None = None) -> tuple[float, float]:
    """Percentile interval of ``statistic`` (default: mean) over B resamples of the rows of ``values``.

    Resamples on which the statistic is undefined (raises ValueError) are skipped.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        raise ValueError("bootstrap needs at least one value")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    if statistic is None:
        stats = values[idx].mean(axis=1)
    else:
        stats = []
        for row in idx:
            try:
                stats.append(statistic(values[row]))
            except ValueError:
                continue
        stats = np.asarray(stats)
        if stats.size == 0:
            raise ValueError("statistic undefined on every resample")
    alpha = (1 - level) / 2
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def _pearson_rows(rows: np.ndarray) -> float:
    return pearson(rows[:, 0], rows[:, 1])


# ----------------------------------------------------------------------------
# per-image evaluation


@dataclass
class MetricRow:
    image_id: int
    iou_heart: float
    iou_lungs: float
    dice_heart: float
    dice_lungs: float
    ctr_pred: float
    ctr_gt: float
    ctr_mc_mean: float = float("nan")
    ctr_std: float = float("nan")
    ctr_p2_5: float = float("nan")
    ctr_p97_5: float = float("nan")
    flagged_samples: int = 0

    @classmethod
    def header(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_row(self) -> tuple:
        return astuple(self)


def score_masks(image_id: int, pred_masks: np.ndarray, gt_heart, gt_lungs, ctr_gt: float) -> MetricRow:
    """Metrics for binary (2, H, W) predicted masks; CTR from the predicted masks (nan if empty)."""
    try:
        ctr_pred = measure_ctr(pred_masks[0], pred_masks[1]).ctr
    except EmptyMaskError:
        ctr_pred = float("nan")
    return MetricRow(image_id, iou(pred_masks[0], gt_heart), iou(pred_masks[1], gt_lungs),
                     dice(pred_masks[0], gt_heart), dice(pred_masks[1], gt_lungs), ctr_pred, ctr_gt)


def score_stack(sample, stack, threshold: float = 0.5) -> MetricRow:
    row = score_masks(sample.sample_id, binarize(mean_mask(stack), threshold),
                      sample.heart_mask, sample.lungs_mask, sample.gt_ctr)
    try:
        est = estimate_ctr(stack, threshold)
        row.ctr_mc_mean, row.ctr_std = est.mean, est.std
        row.ctr_p2_5, row.ctr_p97_5 = est.bounds
        row.flagged_samples = est.flagged
    except CtrEstimationError:
        row.flagged_samples = stack.T
    return row


def evaluate(model, samples, T: int = 20, seed: int = 0, threshold: float = 0.5) -> list[MetricRow]:
    images = np.stack([s.image for s in samples])
    stacks = mc_sample_batch(model, images, T, seed)
    return [score_stack(s, st, threshold) for s, st in zip(samples, stacks)]


@dataclass
class Summary:
    iou_heart: float
    iou_lungs: float
    dice_heart: float
    dice_lungs: float
    ctr_pearson: float
    ctr_coverage: float
    n_images: int
    n_ctr_failures: int


def summarize(rows: Sequence[MetricRow]) -> Summary:
    def col(name):
        return np.array([getattr(r, name) for r in rows], dtype=np.float64)

    pred, gt = col("ctr_pred"), col("ctr_gt")
    ok = np.isfinite(pred) & np.isfinite(gt)
    try:
        r = pearson(pred[ok], gt[ok])
    except ValueError:
        r = float("nan")
    lo, hi = col("ctr_p2_5"), col("ctr_p97_5")
    covered = np.isfinite(lo) & (lo <= gt) & (gt <= hi)
    return Summary(float(col("iou_heart").mean()), float(col("iou_lungs").mean()),
                   float(col("dice_heart").mean()), float(col("dice_lungs").mean()),
                   r, float(covered.mean()), len(rows), int((~ok).sum()))


# ----------------------------------------------------------------------------
# MC-sample-count sweep


@dataclass(frozen=True)
class SweepRow:
    T: int
    metric: str
    value: float
    ci_low: float
    ci_high: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    per_image: dict[int, list[MetricRow]]

    def value(self, T: int, metric: str) -> float:
        for row in self.rows:
            if row.T == T and row.metric == metric:
                return row.value
        raise KeyError((T, metric))


SWEEP_METRICS = ("iou_heart", "iou_lungs", "ctr_pearson")
SWEEP_HEADER = ("T", "metric", "value", "ci_low", "ci_high")


def _with_point(value: float, ci: tuple[float, float]) -> tuple[float, float]:
    return min(ci[0], value), max(ci[1], value)


def sweep_from_stacks(samples, stacks, T_list: Sequence[int], B: int = 2000, boot_seed: int = 0,
                      threshold: float = 0.5) -> SweepResult:
    rows: list[SweepRow] = []
    per_image: dict[int, list[MetricRow]] = {}
    for t in T_list:
        metrics = [score_masks(s.sample_id, binarize(_mean_prefix(st, t), threshold),
                               s.heart_mask, s.lungs_mask, s.gt_ctr) for s, st in zip(samples, stacks)]
        per_image[t] = metrics
        for name in ("iou_heart", "iou_lungs"):
            vals = np.array([getattr(m, name) for m in metrics])
            v = float(vals.mean())
            rows.append(SweepRow(t, name, v, *_with_point(v, bootstrap_ci(vals, B, seed=boot_seed))))
        pairs = np.array([(m.ctr_pred, m.ctr_gt) for m in metrics if np.isfinite(m.ctr_pred)])
        try:
            r = pearson(pairs[:, 0], pairs[:, 1])
            ci = _with_point(r, bootstrap_ci(pairs, B, seed=boot_seed, statistic=_pearson_rows))
        except (ValueError, IndexError):
            r, ci = float("nan"), (float("nan"), float("nan"))
        rows.append(SweepRow(t, "ctr_pearson", r, *ci))
    return SweepResult(rows, per_image)


def _mean_prefix(stack, t: int) -> np.ndarray:
    return mean_mask(stack.prefix(t))


def mc_sweep(model, samples, T_list: Sequence[int] = (1, 2, 5, 10, 20, 30), seed: int = 0,
             B: int = 2000, boot_seed: int = 0) -> SweepResult:
    """Metrics of the thresholded mean mask for each T.

    One pass of max(T_list) samples is drawn; the result for T uses its
    first T samples, which is exactly what an independent run with that T
    and seed would produce.
    """
    if not samples:
        raise ValueError("empty test set")
    images = np.stack([s.image for s in samples])
    stacks = mc_sample_batch(model, images, max(T_list), seed)
    return sweep_from_stacks(samples, stacks, T_list, B, boot_seed)


def seed_variability(model, samples, T_values: Sequence[int], seeds: Sequence[int]) -> dict[int, np.ndarray]:
    """Mean test IoU (heart and lungs averaged) per inference seed, for each T."""
    images = np.stack([s.image for s in samples])
    out = {t: [] for t in T_values}
    for seed in seeds:
        stacks = mc_sample_batch(model, images, max(T_values), seed)
        for t in T_values:
            scores = []
            for s, st in zip(samples, stacks):
                pred = binarize(_mean_prefix(st, t))
                scores.append((iou(pred[0], s.heart_mask) + iou(pred[1], s.lungs_mask)) / 2)
            out[t].append(float(np.mean(scores)))
    return {t: np.array(v) for t, v in out.items()}
