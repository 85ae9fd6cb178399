"""File formats: BTSR tensors, PGM images, checkpoints, CSV tables."""

from __future__ import annotations

import csv
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import FormatError, decode_btsr, encode_btsr, load_btsr, save_btsr

__all__ = [
    "FormatError", "encode_btsr", "decode_btsr", "save_btsr", "load_btsr",
    "write_pgm", "read_pgm", "fnv1a64", "save_checkpoint", "load_checkpoint", "write_csv", "fmt",
]

CKPT_MAGIC = b"BFPN"
CKPT_VERSION = 1


class DigestMismatchError(ValueError):
    """Checkpoint was written for a different model configuration."""


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ----------------------------------------------------------------------------
# PGM (binary P5, 8-bit)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-d")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(buf[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as err:
        raise FormatError(f"{path}: malformed PGM header") from err
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ----------------------------------------------------------------------------
# checkpoints


def _pack_named(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + encode_btsr(array)


def _unpack_named(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    if len(buf) < pos + 2:
        raise FormatError("truncated checkpoint entry")
    (n,) = struct.unpack_from("<H", buf, pos)
    name = buf[pos + 2:pos + 2 + n].decode("utf-8")
    arr, end = decode_btsr(buf, pos + 2 + n)
    return name, arr, end


def save_checkpoint(path, state: "OrderedDict[str, np.ndarray]", config_text: str,
                    optimizer_state: dict | None = None) -> None:
    """Write model tensors (parameters and buffers) plus optional Adam state.

    ``optimizer_state`` is ``{"step": int, "m": {name: arr}, "v": {name: arr}}``.
    """
    parts = [CKPT_MAGIC, struct.pack("<BQI", CKPT_VERSION, fnv1a64(config_text), len(state))]
    parts += [_pack_named(name, np.asarray(arr)) for name, arr in state.items()]
    if optimizer_state is None:
        parts.append(b"\x00")
    else:
        m, v = optimizer_state["m"], optimizer_state["v"]
        parts.append(b"\x01" + struct.pack("<QI", optimizer_state["step"], len(m)))
        for name in m:
            parts.append(_pack_named(name, m[name]))
            parts.append(_pack_named(name, v[name]))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, config_text: str | None = None):
    """Returns ``(state, optimizer_state_or_None, digest)``.

    With ``config_text`` given, a digest mismatch raises :class:`DigestMismatchError`.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    if len(buf) < 17:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, digest, count = struct.unpack_from("<BQI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if config_text is not None and fnv1a64(config_text) != digest:
        raise DigestMismatchError(f"{path}: config digest mismatch")
    pos = 17
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        name, arr, pos = _unpack_named(buf, pos)
        state[name] = arr
    if pos >= len(buf):
        raise FormatError(f"{path}: missing optimizer presence byte")
    present = buf[pos]
    pos += 1
    opt = None
    if present == 1:
        step, n = struct.unpack_from("<QI", buf, pos)
        pos += 12
        m, v = OrderedDict(), OrderedDict()
        for _ in range(n):
            name, m[name], pos = _unpack_named(buf, pos)
            _, v[name], pos = _unpack_named(buf, pos)
        opt = {"step": step, "m": m, "v": v}
    elif present != 0:
        raise FormatError(f"{path}: bad optimizer presence byte {present}")
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return state, opt, digest


# ----------------------------------------------------------------------------
# CSV


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
