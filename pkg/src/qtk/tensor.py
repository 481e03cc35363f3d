"""Dense float64 tensors and the forward-pass primitives built on them.

Tensors are immutable after construction and always hold finite values,
so every downstream computation is deterministic and reproducible
bit-for-bit. "Quantized" tensors are ordinary float tensors whose values
happen to lie on a step-size grid; there are no integer kernels here.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "conv2d",
    "relu",
    "avgpool2d",
    "flatten",
    "add",
    "mean",
    "std",
    "tmin",
    "tmax",
    "load_qtn",
    "save_qtn",
]

QTN_MAGIC = b"QTNS"
QTN_VERSION = 1


class Tensor:
    """Immutable dense n-dimensional array of 64-bit floats.

    The backing numpy array is marked read-only; sharing a Tensor across
    threads is safe. Construction from external input rejects NaN/Inf.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray | Sequence, *, _trusted: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _trusted and not np.all(np.isfinite(arr)):
            raise FormatError("tensor contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return id(self)

    def tolist(self):
        return self._data.tolist()


def tensor(data) -> Tensor:
    """Construct a Tensor from any array-like, validating finiteness."""
    return Tensor(data)


def _wrap(arr: np.ndarray) -> Tensor:
    # Internal results of arithmetic on finite inputs stay finite; skip the scan.
    return Tensor(arr, _trusted=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return _wrap(a.data @ b.data)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-d cross-correlation of x [N,C,H,W] with kernels w [F,C,kh,kw].

    Output spatial size is (H + 2*pad - kh) / stride + 1 and must divide
    exactly; a fractional size is a ShapeError.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{wd + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError("conv2d output size is not integral for the given stride/pad")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col: gather every receptive field, then one matmul per batch.
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(cols.reshape(n, c * kh * kw, ho * wo))
    wmat = w.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols)  # (f,K) @ (n,K,P) -> (n,f,P)
    return _wrap(out.reshape(n, f, ho, wo))


def relu(x: Tensor) -> Tensor:
    return _wrap(np.maximum(x.data, 0.0))


def avgpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Average pooling over non-overlapping (or strided) windows of x [N,C,H,W]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d expects 4-d input, got {x.shape}")
    if size < 1:
        raise ShapeError(f"pool size must be >= 1, got {size}")
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    if h < size or w < size or (h - size) % stride or (w - size) % stride:
        raise ShapeError(f"pool window {size}/stride {stride} does not tile input {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    sn, sc, sh, sw = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, size, size),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return _wrap(win.mean(axis=(4, 5)))


def flatten(x: Tensor) -> Tensor:
    """Collapse all trailing dimensions: [N, ...] -> [N, prod(...)]."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten expects rank >= 2, got {x.shape}")
    n = x.shape[0]
    return _wrap(x.data.reshape(n, -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _wrap(a.data + b.data)


def mean(x: Tensor) -> float:
    return float(np.mean(x.data))


def std(x: Tensor) -> float:
    return float(np.std(x.data))


def tmin(x: Tensor) -> float:
    return float(np.min(x.data))


def tmax(x: Tensor) -> float:
    return float(np.max(x.data))


def save_qtn(path, x: Tensor) -> None:
    """Write a tensor in the .qtn binary format (f32 payload, little-endian)."""
    rank = len(x.shape)
    if rank > 255:
        raise FormatError(f"rank {rank} exceeds the .qtn limit of 255")
    with open(path, "wb") as fh:
        fh.write(QTN_MAGIC)
        fh.write(struct.pack("<BB", QTN_VERSION, rank))
        for dim in x.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(x.data.astype("<f4").tobytes())


def load_qtn(path) -> Tensor:
    """Read a .qtn file, widening the f32 payload to f64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != QTN_MAGIC:
        raise FormatError(f"{path}: not a .qtn file (bad magic)")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != QTN_VERSION:
        raise FormatError(f"{path}: unsupported .qtn version {version}")
    header_end = 6 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated .qtn header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise FormatError(f"{path}: payload size {len(blob) - header_end} != expected {4 * count}")
    payload = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    arr = payload.astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return Tensor(arr, _trusted=True)
