"""Layer-wise step-size calibration by Lp-error minimization.

For a single tensor, the best step size trades round-off error (small
steps) against clipping error (large steps); the balance point moves with
the norm exponent p, so calibrating at several p values traces a family
of candidate step vectors. Each tensor is calibrated independently of all
others, which is exactly the separable approximation that the joint
optimizer later improves on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, QtkError
from .graph import CalibSet, Model, StepEntry, StepVector, collect_activations
from .linesearch import golden_section
from .quantizer import QuantParams
from .tensor import Tensor

__all__ = [
    "DEFAULT_P_GRID",
    "PNormSample",
    "calibrate_tensor",
    "calibrate_model",
]

DEFAULT_P_GRID = (2.0, 2.4, 2.8, 3.2, 3.6, 4.0)

SCAN_POINTS = 128
SCAN_SPAN = 1e3  # coarse scan covers (delta_hi / SCAN_SPAN, delta_hi]
FINE_POINTS = 96  # linear rescan across each promising coarse window
FINE_WINDOWS = 3
REFINE_TOL = 1e-5
_CHUNK = 1 << 14


@dataclass(frozen=True)
class PNormSample:
    """One point on the p-trajectory: exponent, step vector, network loss."""

    p: float
    steps: StepVector
    loss: float | None = None


def _pow_p(err: np.ndarray, p: float) -> np.ndarray:
    """|err|^p with cheap paths for small integer p (pow is ~50x slower)."""
    if p == 1.0:
        return err
    if p == 2.0:
        return err * err
    if p == 3.0:
        return err * err * err
    if p == 4.0:
        sq = err * err
        return sq * sq
    return err**p


def _lp_sum_scan(x: np.ndarray, deltas: np.ndarray, lo: float, hi: float, p: float) -> np.ndarray:
    """Sum_i |Q(x_i) - x_i|^p for every candidate step size (vectorized)."""
    totals = np.zeros(deltas.shape[0])
    d = deltas[:, None]
    for start in range(0, x.size, _CHUNK):
        seg = x[start : start + _CHUNK][None, :]
        k = np.rint(seg / d)
        np.clip(k, lo, hi, out=k)
        err = np.abs(k * d - seg)
        totals += _pow_p(err, p).sum(axis=1)
    return totals


def calibrate_tensor(x: Tensor | np.ndarray, bits: int, signed: bool, p: float) -> QuantParams:
    """Step size minimizing the Lp quantization error of a single tensor.

    Searches (delta_hi / 1000, delta_hi], where delta_hi maps the largest
    magnitude in x onto the top grid level. The error curve is piecewise
    smooth with many shallow local minima, so the search is staged: a
    coarse log-spaced scan of 128 candidates, a linear rescan across the
    few most promising coarse windows (the global basin can hide between
    log-grid points), then golden-section refinement with parabolic polish
    around the overall winner. The returned step is the best point
    evaluated anywhere during the search.
    """
    if not p > 0:
        raise QtkError(f"norm exponent p must be positive, got {p}")
    arr = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)).ravel()
    amax = float(np.max(np.abs(arr))) if arr.size else 0.0
    if amax == 0.0:
        raise DegenerateInputError("tensor is all zeros; no step size is meaningful")
    top = 2 ** (bits - 1) if signed else 2**bits - 1
    lo_level = -top if signed else 0
    delta_hi = amax / top

    candidates = np.geomspace(delta_hi / SCAN_SPAN, delta_hi, SCAN_POINTS)
    sums = _lp_sum_scan(arr, candidates, lo_level, top, p)

    # A few best windows, deduplicated by adjacency.
    order = np.argsort(sums, kind="stable")
    windows: list[int] = []
    for idx in order:
        if len(windows) >= FINE_WINDOWS:
            break
        if all(abs(int(idx) - w) > 1 for w in windows):
            windows.append(int(idx))

    best_delta = float(candidates[windows[0]])
    best_err = float(sums[windows[0]])
    for idx in windows:
        a = candidates[max(idx - 1, 0)]
        b = candidates[min(idx + 1, SCAN_POINTS - 1)]
        fine = np.linspace(a, b, FINE_POINTS)
        fine_sums = _lp_sum_scan(arr, fine, lo_level, top, p)
        local = int(np.argmin(fine_sums))
        if fine_sums[local] < best_err:
            best_err = float(fine_sums[local])
            best_delta = float(fine[local])

        def err_at(delta: float) -> float:
            k = np.rint(arr / delta)
            np.clip(k, lo_level, top, out=k)
            return float((np.abs(k * delta - arr) ** p).sum())

        refined = golden_section(
            err_at,
            float(fine[max(local - 1, 0)]),
            float(fine[min(local + 1, FINE_POINTS - 1)]),
            rel_tol=REFINE_TOL,
        )
        if refined.fx < best_err:
            best_err = refined.fx
            best_delta = refined.x
    return QuantParams(delta=best_delta, bits=bits, signed=signed)


def calibrate_model(
    model: Model,
    calib: CalibSet,
    bits_w: int | None,
    bits_a: int | None,
    p: float,
    activations: dict[int, np.ndarray] | None = None,
    threads: int = 1,
) -> StepVector:
    """Calibrate every quantization point of a model independently at one p.

    Weight tensors are calibrated directly (signed grid). Activation points
    use the pooled full-precision post-ReLU values over the calibration set
    (unsigned grid); pass a precollected `activations` map to reuse the
    forward pass across several p values. Passing bits of None disables
    that side entirely: no entries of that kind appear in the result.
    """
    entries: list[StepEntry] = []
    if bits_w is not None:
        for idx in model.weight_points():
            q = calibrate_tensor(model.layers[idx].weight, bits_w, True, p)
            entries.append(StepEntry(layer=idx, kind="weight", delta=q.delta, bits=bits_w))
    if bits_a is not None and model.activation_points():
        if activations is None:
            activations = collect_activations(model, calib, threads=threads)
        for idx in model.activation_points():
            q = calibrate_tensor(activations[idx], bits_a, False, p)
            entries.append(StepEntry(layer=idx, kind="activation", delta=q.delta, bits=bits_a))
    return StepVector(entries)
