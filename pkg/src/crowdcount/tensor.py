"""Dense array primitives on channel-first ``numpy`` arrays.

Every value in the package is a plain ``numpy.ndarray``. Spatial tensors are
laid out ``[C, H, W]`` (row-major, last two axes spatial). Convolutions are
stride 1 with zero same-padding, so spatial extents never change.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

_MAGIC = b"CFTN"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """im2col matrix of shape ``[C*kh*kw, H*W]`` for same-padded input."""
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # c, h, w, kh, kw
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h * w)


def _check_conv(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None) -> None:
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.shape}, {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernels expect {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None,
           cols: np.ndarray | None = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation.

    ``out[o, y, x] = bias[o] + sum_{c,dy,dx} in[c, y+dy-kh//2, x+dx-kw//2] * k[o, c, dy, dx]``

    ``cols`` may pass a precomputed im2col matrix of ``x``.
    """
    _check_conv(x, kernels, bias)
    cout, _, kh, kw = kernels.shape
    h, w = x.shape[1:]
    if cols is None:
        cols = _windows(x, kh, kw)
    out = (kernels.reshape(cout, -1) @ cols).reshape(cout, h, w)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_grads(x: np.ndarray, kernels: np.ndarray, gout: np.ndarray, cols: np.ndarray | None = None,
                 need_input: bool = True):
    """Gradients of ``conv2d`` w.r.t. input, kernels and bias given ``d loss / d out``.

    The input gradient is ``None`` when ``need_input`` is false.
    """
    cout, cin, kh, kw = kernels.shape
    h, w = x.shape[1:]
    g2 = gout.reshape(cout, h * w)
    if cols is None:
        cols = _windows(x, kh, kw)
    gk = (g2 @ cols.T).reshape(kernels.shape)
    gx = None
    if need_input:
        # same-padded correlation with the flipped, transposed kernels
        flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = conv2d(gout, flipped)
    gb = g2.sum(axis=1)
    return gx, gk, gb


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return a * a.dtype.type(alpha)


def total(a: np.ndarray) -> np.ndarray:
    """Sum of all entries, as a 0-d array of the input precision."""
    return np.asarray(a.sum(), dtype=a.dtype)


def sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    pos = 1 / (1 + e)
    return np.where(a >= 0, pos, e * pos)


def tanh(a: np.ndarray) -> np.ndarray:
    return np.tanh(a)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_channels: trailing extents differ {p.shape[1:]} vs {tail}")
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------- binary I/O


def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype == np.float64:
        tag, code = 8, "<f8"
    elif t.dtype == np.float32:
        tag, code = 4, "<f4"
    else:
        raise TypeError(f"only float32/float64 tensors are serialisable, got {t.dtype}")
    if t.ndim > 255:
        raise ShapeError("rank too large")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", tag, t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype=code).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor record")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != _MAGIC:
        raise ValueError("not a CFTN tensor record (bad magic)")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in (4, 8):
        raise ValueError(f"bad precision tag {tag}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    code = "<f4" if tag == 4 else "<f8"
    n = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, n * tag)
    return np.frombuffer(raw, dtype=code).astype(np.float32 if tag == 4 else np.float64).reshape(shape)


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
