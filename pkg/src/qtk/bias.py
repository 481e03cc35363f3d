"""Per-channel statistical correction of quantized weight tensors.

Quantization shifts the mean of each output channel of a weight tensor;
adding the mean difference back removes that systematic part of the
error. The optional variance mode additionally rescales each channel so
its standard deviation matches the full-precision weights. Corrected
weights generally leave the quantization grid: the correction is a plain
float offset applied after grid snapping.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

__all__ = ["bias_correct", "CORRECTION_MODES"]

CORRECTION_MODES = ("none", "mean", "mean-var")


def bias_correct(w: Tensor, wq: Tensor, axis: int = 0, mode: str = "mean") -> Tensor:
    """Restore per-channel statistics of wq to those of w.

    Channels are slices along `axis` (axis 0 is the output-channel axis for
    both dense and conv weights). Mode "mean" restores each channel mean;
    "mean-var" additionally matches the channel standard deviation when the
    corrected channel is non-constant. Mode "none" returns wq unchanged.
    """
    if mode not in CORRECTION_MODES:
        raise ShapeError(f"unknown correction mode {mode!r}")
    if w.shape != wq.shape:
        raise ShapeError(f"weight shapes differ: {w.shape} vs {wq.shape}")
    if not -len(w.shape) <= axis < len(w.shape):
        raise ShapeError(f"axis {axis} invalid for shape {w.shape}")
    if mode == "none":
        return wq

    wf = np.moveaxis(w.data, axis, 0)
    qf = np.moveaxis(wq.data, axis, 0)
    channels = wf.shape[0]
    wf = wf.reshape(channels, -1)
    qf = qf.reshape(channels, -1)

    mean_w = wf.mean(axis=1, keepdims=True)
    corrected = qf + (mean_w - qf.mean(axis=1, keepdims=True))

    if mode == "mean-var":
        std_w = wf.std(axis=1, keepdims=True)
        mean_c = corrected.mean(axis=1, keepdims=True)
        std_c = corrected.std(axis=1, keepdims=True)
        scale = np.where(std_c > 0.0, std_w / np.where(std_c > 0.0, std_c, 1.0), 1.0)
        corrected = mean_c + (corrected - mean_c) * scale

    out = np.moveaxis(corrected.reshape(np.moveaxis(w.data, axis, 0).shape), 0, axis)
    return Tensor(np.ascontiguousarray(out), _trusted=True)
