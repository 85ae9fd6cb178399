"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
``backward`` visits the recorded nodes in exact reverse execution order
(each node carries a monotonically increasing sequence number) and frees the
graph afterwards.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other)) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for t in nodes.values():
        if t._backward is not None:
            t._parents = ()
            t._backward = None


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    k = a.data.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(k), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log domain violation: input must be strictly positive")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def masked_scale(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a`` (dropout masks)."""
    mask = mask.astype(a.dtype, copy=False)
    out = a.data * mask
    if out.shape != a.shape:
        raise ValueError(f"mask {mask.shape} does not broadcast to {a.shape}")
    return _make(out, (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# shape and reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axes, a.ndim)
    if not axes:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def select(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Take one slice along ``axis``, dropping that dimension."""
    axis = _norm_axes(axis, a.ndim)[0]
    if not 0 <= index < a.shape[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} of size {a.shape[axis]}")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.moveaxis(full, axis, 0)[index] = g
        return (full,)

    return _make(np.ascontiguousarray(np.take(a.data, index, axis=axis)), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    edges = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, edges, axis=axis))

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bw)


def channel_affine(x: Tensor, scale_: Tensor, shift: Tensor | None = None) -> Tensor:
    """``x * scale[c] + shift[c]`` for an NCHW tensor and per-channel vectors."""
    c = x.shape[1]
    if scale_.shape != (c,) or (shift is not None and shift.shape != (c,)):
        raise ValueError(f"per-channel parameters must have shape ({c},)")
    view = (1, c) + (1,) * (x.ndim - 2)
    s = scale_.data.reshape(view)
    out = x.data * s
    if shift is not None:
        out = out + shift.data.reshape(view)
    red = (0,) + tuple(range(2, x.ndim))
    xd = x.data

    def bw(g):
        gs = (g * xd).sum(axis=red)
        return (g * s, gs, g.sum(axis=red) if shift is not None else None)

    parents = (x, scale_) if shift is None else (x, scale_, shift)
    return _make(out, parents, bw)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    c = x.shape[1]
    if bias.shape != (c,):
        raise ValueError(f"bias must have shape ({c},), got {bias.shape}")
    view = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=red)))


def normalize(x: Tensor, axes, eps: float) -> Tensor:
    """Standardize over ``axes`` using the population variance."""
    axes = _norm_axes(axes, x.ndim)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(xd.dtype)

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw)


# ----------------------------------------------------------------------------
# convolution and resampling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return view.reshape(n * ho * wo, c * kh * kw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output extent: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ValueError("upsample expects NCHW input")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial size {(h, w)} not divisible by pool factor {factor}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    k = 1.0 / (factor * factor)

    def bw(g):
        return (np.repeat(np.repeat(g * k, factor, axis=2), factor, axis=3),)

    return _make(out.astype(x.dtype), (x,), bw)


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (factor*size, size), half-pixel centers, border clamped."""
    dst = np.arange(size * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    m = np.zeros((size * factor, size), dtype=np.float64)
    m[dst, i0] += 1 - frac
    m[dst, i1] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ValueError("upsample expects NCHW input")
    _, _, h, w = x.shape
    ah = bilinear_matrix(h, factor, x.dtype)
    aw = bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


# ----------------------------------------------------------------------------
# BTSR binary tensor format

BTSR_MAGIC = b"BTSR"
BTSR_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for malformed or unsupported binary files."""


def encode_btsr(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise FormatError(f"BTSR supports float32 and uint8 only, got {array.dtype}")
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    header = BTSR_MAGIC + struct.pack("<BBB", BTSR_VERSION, _DTYPE_CODES[array.dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_btsr(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 4] != BTSR_MAGIC:
        raise FormatError("bad BTSR magic")
    if len(buf) < offset + 7:
        raise FormatError("truncated BTSR header")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != BTSR_VERSION:
        raise FormatError(f"unsupported BTSR version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown BTSR dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated BTSR header")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated BTSR payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.astype(dtype.newbyteorder("="), copy=True).reshape(shape), pos + nbytes


def save_btsr(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_btsr(array))


def load_btsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_btsr(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after BTSR tensor")
    return arr
