"""BCE minus soft-Jaccard objective, augmentation, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .ctr import EmptyMaskError, measure_ctr
from .evaluate import iou
from .model import BayesianFPN, CLASS_NAMES, snapshot
from .nn import LayerMode, RngStream
from .phantom import PhantomSample, as_batch
from .tensor import Tensor

log = logging.getLogger(__name__)

JACCARD_SMOOTH = 1.0
BCE_CLAMP = 1e-7


class TrainingDivergedError(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossValue:
    total: float
    bce_heart: float
    bce_lungs: float
    jaccard_heart: float
    jaccard_lungs: float


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def soft_jaccard(pred: Tensor, target) -> Tensor:
    """(sum p*y + 1) / (sum p + sum y - sum p*y + 1), summed over every element."""
    y = _const(target, pred)
    inter = T.sum(pred * y)
    union = T.sum(pred) + T.sum(y) - inter
    return T.div(inter + JACCARD_SMOOTH, union + JACCARD_SMOOTH)


def bce(pred: Tensor, target) -> Tensor:
    y = _const(target, pred)
    p = T.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)


def total_loss(pred: Tensor, target) -> tuple[Tensor, LossValue]:
    y = _const(target, pred)
    if pred.shape != y.shape or pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"pred {pred.shape} and target {y.shape} must both be (N, 2, H, W)")
    terms = []
    parts = {}
    for c, name in enumerate(CLASS_NAMES):
        pc, yc = T.select(pred, c), T.select(y, c)
        b, j = bce(pc, yc), soft_jaccard(pc, yc)
        terms.append(b - j)
        parts[f"bce_{name}"] = b.item()
        parts[f"jaccard_{name}"] = j.item()
    total = terms[0] + terms[1]
    return total, LossValue(total=total.item(), **parts)


# ----------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"step": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["step"])
        for name in self.m:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    crop_p: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    rotate_p: float = 0.5
    max_angle: float = 5.0
    noise_p: float = 0.05
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    blur_p: float = 0.05
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    sharpen_p: float = 0.05
    sharpen_amount: tuple[float, float] = (0.5, 1.0)
    brightness_p: float = 0.01
    brightness_shift: float = 0.1
    hflip_p: float = 0.01

    @classmethod
    def disabled(cls) -> AugmentationSpec:
        return cls(crop_p=0, rotate_p=0, noise_p=0, blur_p=0, sharpen_p=0, brightness_p=0, hflip_p=0)


def geometric_matrix(size: tuple[int, int], crop=None, angle_deg: float = 0.0, hflip: bool = False) -> np.ndarray:
    """Homogeneous 3x3 map from output (row, col) to input (row, col).

    The output is flipped, then rotated about the image center, then scaled
    into the crop box ``(top, left, height, width)`` of the input.
    """
    h, w = size
    m = np.eye(3)
    if hflip:
        m = np.array([[1, 0, 0], [0, -1, w - 1], [0, 0, 1]], dtype=float) @ m
    if angle_deg:
        th = math.radians(angle_deg)
        cr, cc = (h - 1) / 2, (w - 1) / 2
        rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
        shift = np.array([[1, 0, cr], [0, 1, cc], [0, 0, 1]], dtype=float)
        unshift = np.array([[1, 0, -cr], [0, 1, -cc], [0, 0, 1]], dtype=float)
        m = shift @ rot @ unshift @ m
    if crop is not None:
        top, left, ch, cw = crop
        sr, sc = ch / h, cw / w
        m = np.array([[sr, 0, top + 0.5 * sr - 0.5], [0, sc, left + 0.5 * sc - 0.5], [0, 0, 1]]) @ m
    return m


def transform_point(matrix: np.ndarray, point) -> np.ndarray:
    """Where an input-space (row, col) lands in the output."""
    r, c = point
    return (np.linalg.inv(matrix) @ np.array([r, c, 1.0]))[:2]


def warp(array: np.ndarray, matrix: np.ndarray, is_mask: bool) -> np.ndarray:
    if is_mask:
        out = ndimage.affine_transform(array.astype(np.float64), matrix, order=1, mode="constant", cval=0.0)
        return (out >= 0.5).astype(np.uint8)
    return ndimage.affine_transform(array.astype(np.float64), matrix, order=1, mode="nearest")


def rotate_mask(mask: np.ndarray, angle_deg: float) -> np.ndarray:
    return warp(mask, geometric_matrix(mask.shape, angle_deg=angle_deg), is_mask=True)


def _random_crop(h: int, w: int, spec: AugmentationSpec, rng: np.random.Generator):
    area = h * w
    for _ in range(10):
        target = rng.uniform(*spec.crop_scale) * area
        ratio = math.exp(rng.uniform(math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1])))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = int(round(math.sqrt(spec.crop_scale[0]) * min(h, w)))
    return (h - side) // 2, (w - side) // 2, side, side


def augment(sample: PhantomSample, spec: AugmentationSpec, rng: np.random.Generator) -> PhantomSample:
    """Geometric transforms hit image and masks alike; photometric ones only the image."""
    img = sample.image[0].astype(np.float64)
    heart, lungs = sample.heart_mask, sample.lungs_mask
    h, w = img.shape

    crop = _random_crop(h, w, spec, rng) if rng.random() < spec.crop_p else None
    angle = rng.uniform(-spec.max_angle, spec.max_angle) if rng.random() < spec.rotate_p else 0.0
    flip = bool(rng.random() < spec.hflip_p)
    if crop is not None or angle or flip:
        m = geometric_matrix((h, w), crop, angle, flip)
        img = warp(img, m, is_mask=False)
        heart = warp(heart, m, is_mask=True)
        lungs = warp(lungs, m, is_mask=True)

    photometric = False
    if rng.random() < spec.noise_p:
        img = img + rng.normal(0.0, rng.uniform(*spec.noise_sigma), img.shape)
        photometric = True
    if rng.random() < spec.blur_p:
        img = ndimage.gaussian_filter(img, rng.uniform(*spec.blur_sigma), mode="nearest")
        photometric = True
    if rng.random() < spec.sharpen_p:
        amount = rng.uniform(*spec.sharpen_amount)
        img = img + amount * (img - ndimage.gaussian_filter(img, 1.0, mode="nearest"))
        photometric = True
    if rng.random() < spec.brightness_p:
        img = img + rng.uniform(-spec.brightness_shift, spec.brightness_shift)
        photometric = True

    if crop is None and not angle and not flip and not photometric:
        return sample
    try:
        ctr = measure_ctr(heart, lungs).ctr
    except EmptyMaskError:
        ctr = float("nan")
    return replace(sample, image=np.clip(img, 0.0, 1.0).astype(np.float32)[None],
                   heart_mask=heart, lungs_mask=lungs, gt_ctr=ctr)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 3000
    seed: int = 0
    eval_every: int = 250
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec(**{k: tuple(v) if isinstance(v, list) else v
                                                    for k, v in self.augmentation.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    best_state: dict
    best_step: int
    best_val_iou: float
    history: list[tuple[int, LossValue]]
    val_history: list[tuple[int, float]]
    optimizer: Adam


def _index_stream(n: int, batch_size: int, seed: int) -> Iterator[list[tuple[int, int]]]:
    """Yield batches of (epoch, index); epochs are seeded permutations, concatenated."""
    epoch = 0
    batch: list[tuple[int, int]] = []
    while True:
        for i in np.random.default_rng([seed, 1, epoch]).permutation(n):
            batch.append((epoch, int(i)))
            if len(batch) == batch_size:
                yield batch
                batch = []
        epoch += 1


def validation_iou(model: BayesianFPN, samples: Sequence[PhantomSample]) -> float:
    """Mean of heart and lungs IoU at threshold 0.5, Eval mode."""
    images, masks = as_batch(samples)
    pred = model.predict(images) >= 0.5
    scores = [iou(pred[i, c], masks[i, c] > 0) for i in range(len(samples)) for c in range(2)]
    return float(np.mean(scores))


def train(model: BayesianFPN, train_set: Sequence[PhantomSample], config: TrainConfig,
          val_set: Sequence[PhantomSample] = (), callback: Callable[[int, LossValue], None] | None = None
          ) -> TrainResult:
    if not train_set:
        raise ValueError("training set is empty")
    opt = Adam(model.named_parameters(), config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
    history: list[tuple[int, LossValue]] = []
    val_history: list[tuple[int, float]] = []
    best_state, best_step, best_val = None, -1, -math.inf
    stream = _index_stream(len(train_set), config.batch_size, config.seed)

    for step in range(config.steps):
        batch = [augment(train_set[i], config.augmentation, np.random.default_rng([config.seed, 2, epoch, i]))
                 for epoch, i in next(stream)]
        images, masks = as_batch(batch)
        pred = model(Tensor(images.astype(model.dtype)), LayerMode.TRAIN, RngStream(config.seed, step))
        loss, value = total_loss(pred, masks.astype(model.dtype))
        if not math.isfinite(value.total):
            raise TrainingDivergedError(f"non-finite loss at step {step}: {value}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step, value))
        if callback is not None:
            callback(step, value)

        last = step == config.steps - 1
        if val_set and ((step + 1) % config.eval_every == 0 or last):
            score = validation_iou(model, val_set)
            val_history.append((step, score))
            log.info("step %d loss %.4f val IoU %.4f", step, value.total, score)
            if score > best_val:
                best_state, best_step, best_val = snapshot(model), step, score

    if best_state is None:
        best_state, best_step = snapshot(model), config.steps - 1
        best_val = validation_iou(model, val_set) if val_set else float("nan")
    return TrainResult(best_state, best_step, best_val, history, val_history, opt)


LOSS_CSV_HEADER = ("step", "total", "bce_h", "bce_l", "j_h", "j_l")


def loss_rows(history: Sequence[tuple[int, LossValue]]):
    for step, v in history:
        yield (step, v.total, v.bce_heart, v.bce_lungs, v.jaccard_heart, v.jaccard_lungs)
