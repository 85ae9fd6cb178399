"""Bayesian FPN: residual encoder with dropout, FPN decoder, two sigmoid planes."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import ConvNormAct, Conv2d, Dropout, LayerMode, Module, Norm, NormKind, ResidualBlock, RngStream
from .tensor import Tensor

HEART, LUNGS = 0, 1
CLASS_NAMES = ("heart", "lungs")
PROB_FLOOR = 1e-7


@dataclass
class ModelConfig:
    input_size: int = 64
    base_channels: int = 16
    encoder_stages: int = 4
    pyramid_channels: int = 32
    segmentation_channels: int = 16
    encoder_dropout_p: float = 0.5
    decoder_dropout_p: float = 0.2
    head_spatial_dropout_p: float = 0.1
    norm_decoder: str = "instance"
    norm_encoder: str = "batch"
    norm_groups: int = 8
    num_classes: int = 2
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        reduction = 2 ** (self.encoder_stages + 1)
        if self.input_size < 32 or self.input_size % reduction:
            raise ValueError(f"input_size must be >= 32 and divisible by {reduction}")
        if self.encoder_stages != 4:
            raise ValueError("the encoder has exactly 4 stages")
        if self.num_classes != 2:
            raise ValueError("num_classes must be 2 (heart, lungs)")
        for p in (self.encoder_dropout_p, self.decoder_dropout_p, self.head_spatial_dropout_p):
            if not 0 <= p < 1:
                raise ValueError("dropout rates must lie in [0, 1)")
        for kind in (self.norm_decoder, self.norm_encoder):
            NormKind(kind, self.norm_groups)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def without_dropout(self) -> ModelConfig:
        return ModelConfig.from_dict({**asdict(self), "encoder_dropout_p": 0.0,
                                      "decoder_dropout_p": 0.0, "head_spatial_dropout_p": 0.0})


class BayesianFPN(Module):
    """Encoder: stem -> stage1 -> drop -> stage2 -> drop -> stage3 -> drop -> stage4.

    Decoder: lateral 1x1 convs (each followed by dropout), top-down nearest
    x2 upsampling with addition, one 3x3 block per level, nearest resize of
    every level to 1/4 scale (no dropout there), concatenation, fusion
    block, spatial dropout, 1x1 head, bilinear x4, sigmoid.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.init_seed)
        enc = NormKind(cfg.norm_encoder, cfg.norm_groups)
        dec = NormKind(cfg.norm_decoder, cfg.norm_groups)
        widths = [cfg.base_channels * 2 ** i for i in range(4)]

        self.input_norm = Norm(1, NormKind("batch"), dtype=dt)
        self.stem = ConvNormAct(1, widths[0], 4, enc, rng, stride=2, padding=1, dtype=dt)
        self.stages = []
        cin = widths[0]
        for w in widths:
            self.stages.append(_Stage(cin, w, enc, rng, dt))
            cin = w
        self.encoder_dropout = [Dropout(cfg.encoder_dropout_p, layer_id=1 + i) for i in range(3)]

        pc, sc = cfg.pyramid_channels, cfg.segmentation_channels
        self.laterals = [Conv2d(w, pc, 1, rng, dtype=dt) for w in widths]
        self.lateral_dropout = [Dropout(cfg.decoder_dropout_p, layer_id=10 + i) for i in range(4)]
        self.level_blocks = [ConvNormAct(pc, sc, 3, dec, rng, dtype=dt) for _ in widths]
        self.fuse = ConvNormAct(4 * sc, pc, 3, dec, rng, dtype=dt)
        self.head_dropout = Dropout(cfg.head_spatial_dropout_p, layer_id=20, spatial=True)
        self.head = Conv2d(pc, cfg.num_classes, 1, rng, dtype=dt)

    def __call__(self, image: Tensor, mode: LayerMode, rng: RngStream | None = None) -> Tensor:
        return self.forward(image, mode, rng)

    def forward(self, image: Tensor, mode: LayerMode, rng: RngStream | None = None) -> Tensor:
        size = self.config.input_size
        if image.ndim != 4 or image.shape[1:] != (1, size, size):
            raise ValueError(f"expected image of shape (N, 1, {size}, {size}), got {image.shape}")
        if mode.stochastic and rng is None:
            raise ValueError(f"{mode.value} mode needs an RngStream")
        x = image if image.dtype == self.dtype else Tensor(image.data.astype(self.dtype))

        x = self.input_norm(x, mode)
        x = self.stem(x, mode)
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.encoder_dropout[i - 1](x, mode, rng)
            x = stage(x, mode)
            feats.append(x)

        lat = [drop(conv(f), mode, rng) for conv, f, drop in zip(self.laterals, feats, self.lateral_dropout)]
        pyramid = [lat[3]]
        for k in (2, 1, 0):
            pyramid.insert(0, lat[k] + T.upsample_nearest(pyramid[0], 2))

        levels = []
        for k, (block, p) in enumerate(zip(self.level_blocks, pyramid)):
            y = block(p, mode)
            levels.append(T.upsample_nearest(y, 2 ** k))
        x = self.fuse(T.concat(levels, axis=1), mode)
        x = self.head_dropout(x, mode, rng)
        logits = T.upsample_bilinear(self.head(x), 4)
        probs = T.clip(T.sigmoid(logits), PROB_FLOOR, 1 - PROB_FLOOR)
        if not np.all(np.isfinite(probs.data)):
            raise FloatingPointError("non-finite values in model output")
        return probs

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def predict(self, images: np.ndarray, mode: LayerMode = LayerMode.EVAL, rng: RngStream | None = None,
                batch_size: int = 32) -> np.ndarray:
        """Forward numpy images (N, 1, H, W) without recording a graph."""
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = Tensor(np.asarray(images[start:start + batch_size], dtype=self.dtype))
                out.append(self.forward(chunk, mode, rng).data)
        return np.concatenate(out, axis=0)

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
            target[...] = value

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class _Stage(Module):
    def __init__(self, cin: int, cout: int, norm: NormKind, rng, dtype):
        self.blocks = [ResidualBlock(cin, cout, 2, norm, rng, dtype),
                       ResidualBlock(cout, cout, 1, norm, rng, dtype)]

    def __call__(self, x: Tensor, mode: LayerMode) -> Tensor:
        for block in self.blocks:
            x = block(x, mode)
        return x


def build(config: ModelConfig | None = None, **overrides) -> BayesianFPN:
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig.from_dict({**asdict(config), **overrides})
    return BayesianFPN(config)


def snapshot(model: BayesianFPN) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.copy()) for k, v in model.state_dict().items())


__all__ = ["ModelConfig", "BayesianFPN", "build", "snapshot", "HEART", "LUNGS", "CLASS_NAMES"]
