"""Layers with train / eval / MC-inference behaviour."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LayerMode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    MC = "mc"

    @property
    def stochastic(self) -> bool:
        return self is not LayerMode.EVAL


@dataclass(frozen=True)
class RngStream:
    """Counter-based randomness keyed by (seed, layer id, counter).

    Draws depend only on the key, never on call order, so parallel or
    reordered execution reproduces the same masks.
    """

    seed: int
    counter: int = 0

    def generator(self, layer_id: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, layer_id, self.counter]))

    def with_counter(self, counter: int) -> RngStream:
        return RngStream(self.seed, counter)


@dataclass(frozen=True)
class NormKind:
    kind: str = "instance"
    groups: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("batch", "group", "instance"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")
        if self.groups < 1:
            raise ValueError("groups must be positive")


# ----------------------------------------------------------------------------
# functional forms


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"groups={groups} does not divide {c} channels")
    xg = T.reshape(x, (n, groups, c // groups, h, w))
    xg = T.normalize(xg, (2, 3, 4), eps)
    return T.channel_affine(T.reshape(xg, (n, c, h, w)), weight, bias)


def instance_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return group_norm(x, x.shape[1], weight, bias, eps)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: LayerMode,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch statistics in TRAIN (updating the running arrays in place), running statistics otherwise."""
    if mode is LayerMode.TRAIN:
        if x.shape[0] < 2:
            raise ValueError("train-mode batch norm needs at least 2 samples")
        xd = x.data
        mu = xd.mean(axis=(0, 2, 3))
        var = ((xd - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
        return T.channel_affine(T.normalize(x, (0, 2, 3), eps), weight, bias)
    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    scale_ = weight * Tensor(inv)
    shift = bias - weight * Tensor((running_mean * inv).astype(x.dtype))
    return T.channel_affine(x, scale_, shift)


def dropout(x: Tensor, p: float, mode: LayerMode, rng: RngStream | None, layer_id: int = 0) -> Tensor:
    _check_rate(p)
    if p == 0 or not mode.stochastic:
        return x
    keep = rng.generator(layer_id).random(x.shape) >= p
    return T.masked_scale(x, keep / (1.0 - p))


def spatial_dropout(x: Tensor, p: float, mode: LayerMode, rng: RngStream | None, layer_id: int = 0) -> Tensor:
    _check_rate(p)
    if p == 0 or not mode.stochastic:
        return x
    n, c = x.shape[:2]
    keep = rng.generator(layer_id).random((n, c)) >= p
    return T.masked_scale(x, (keep / (1.0 - p)).reshape((n, c) + (1,) * (x.ndim - 2)))


def _check_rate(p: float) -> None:
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")


# ----------------------------------------------------------------------------
# modules


class Module:
    """Minimal container: parameters are grad-requiring Tensor attributes,
    buffers are numpy array attributes listed in ``_buffer_names``."""

    _buffer_names: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            else:
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, *,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        fan_in = cin * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Norm(Module):
    def __init__(self, channels: int, kind: NormKind, momentum: float = 0.1, dtype=np.float32):
        if kind.kind == "group" and channels % kind.groups:
            raise ValueError(f"groups={kind.groups} does not divide {channels} channels")
        self.kind = kind
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if kind.kind == "batch":
            self._buffer_names = ("running_mean", "running_var")
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, mode: LayerMode) -> Tensor:
        k = self.kind
        if k.kind == "instance":
            return instance_norm(x, self.weight, self.bias, k.eps)
        if k.kind == "group":
            return group_norm(x, k.groups, self.weight, self.bias, k.eps)
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          mode, k.eps, self.momentum)


class Dropout(Module):
    def __init__(self, p: float, layer_id: int, spatial: bool = False):
        _check_rate(p)
        self.p = p
        self.layer_id = layer_id
        self.spatial = spatial

    def __call__(self, x: Tensor, mode: LayerMode, rng: RngStream | None) -> Tensor:
        fn = spatial_dropout if self.spatial else dropout
        return fn(x, self.p, mode, rng, self.layer_id)


class ConvNormAct(Module):
    def __init__(self, cin: int, cout: int, kernel: int, norm: NormKind, rng: np.random.Generator, *,
                 stride: int = 1, padding: int | None = None, dtype=np.float32):
        if padding is None:
            padding = (kernel - 1) // 2
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, padding=padding, bias=False, dtype=dtype)
        self.norm = Norm(cout, norm, dtype=dtype)

    def __call__(self, x: Tensor, mode: LayerMode) -> Tensor:
        return T.relu(self.norm(self.conv(x), mode))


class ResidualBlock(Module):
    """Basic two-convolution residual block.

    Stride-2 blocks use a 4x4 kernel with padding 1 so even extents halve
    exactly; the projection shortcut average-pools before its 1x1 conv.
    """

    def __init__(self, cin: int, cout: int, stride: int, norm: NormKind, rng: np.random.Generator,
                 dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        k1 = 3 if stride == 1 else 4
        self.stride = stride
        self.conv1 = Conv2d(cin, cout, k1, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.norm1 = Norm(cout, norm, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, bias=False, dtype=dtype)
        self.norm2 = Norm(cout, norm, dtype=dtype)
        if stride > 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, bias=False, dtype=dtype)
            self.proj_norm = Norm(cout, norm, dtype=dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def __call__(self, x: Tensor, mode: LayerMode) -> Tensor:
        out = T.relu(self.norm1(self.conv1(x), mode))
        out = self.norm2(self.conv2(out), mode)
        if self.proj is None:
            shortcut = x
        else:
            s = T.avg_pool2d(x, self.stride) if self.stride > 1 else x
            shortcut = self.proj_norm(self.proj(s), mode)
        if shortcut.shape != out.shape:
            raise ValueError(f"residual shape mismatch: {shortcut.shape} vs {out.shape}")
        return T.relu(out + shortcut)
