"""Loss-surface diagnostics over the step-size parameters.

Everything here treats the loss as a black-box function of the step-size
vector: 2-D grid scans over a parameter pair, central-difference gradient
and Hessian, Gaussian curvature, and the second-order interaction term
that quantifies how strongly the parameters couple. Probe ordering is
fixed, so repeated runs produce identical artifacts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import QtkError, ShapeError
from .graph import CalibSet, Model, StepVector, loss

__all__ = [
    "HessianMatrix",
    "CurvatureReport",
    "loss_evaluator",
    "grid_scan",
    "gradient_fd",
    "hessian_fd",
    "gaussian_curvature",
    "interaction_term",
    "interaction_split",
    "write_grid_csv",
    "write_matrix_csv",
    "write_vector_csv",
]

Evaluator = Callable[[np.ndarray], float]


def loss_evaluator(
    model: Model, calib: CalibSet, template: StepVector, threads: int = 1
) -> Evaluator:
    """Loss as a function of the step-size vector, using `template` layout."""

    def evaluate(deltas: np.ndarray) -> float:
        return loss(model, calib, template.with_deltas(deltas), threads=threads)

    return evaluate


def _checked(evaluate: Evaluator, point: np.ndarray) -> float:
    value = float(evaluate(point))
    if not math.isfinite(value):
        raise QtkError(f"loss is not finite at probe point {point.tolist()}")
    return value


def grid_scan(
    evaluate: Evaluator,
    baseline: Sequence[float] | np.ndarray,
    index_i: int,
    index_j: int,
    range_i: tuple[float, float],
    range_j: tuple[float, float],
    resolution: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Loss over a 2-D grid of two step sizes, others held at the baseline.

    Returns (values_i, values_j, losses) where losses[r, c] is the loss at
    (values_i[r], values_j[c]).
    """
    baseline = np.asarray(baseline, dtype=np.float64)
    n = baseline.size
    if not (0 <= index_i < n and 0 <= index_j < n):
        raise ShapeError(f"parameter indices ({index_i}, {index_j}) out of range for dim {n}")
    if index_i == index_j:
        raise ShapeError("grid scan needs two distinct parameter indices")
    if resolution < 2:
        raise ShapeError(f"resolution must be >= 2, got {resolution}")
    values_i = np.linspace(range_i[0], range_i[1], resolution)
    values_j = np.linspace(range_j[0], range_j[1], resolution)
    losses = np.empty((resolution, resolution))
    for r, di in enumerate(values_i):
        for c, dj in enumerate(values_j):
            point = baseline.copy()
            point[index_i] = di
            point[index_j] = dj
            losses[r, c] = evaluate(point)
    return values_i, values_j, losses


def _steps_for(delta: np.ndarray, h_rel: float, indices: np.ndarray) -> np.ndarray:
    if not 0.0 < h_rel < 0.5:
        raise QtkError(f"h_rel must lie in (0, 0.5), got {h_rel}")
    if np.any(delta[indices] <= 0.0):
        raise QtkError("finite differences need strictly positive base parameters")
    return h_rel * delta[indices]


def _resolve_indices(delta: np.ndarray, indices) -> np.ndarray:
    if indices is None:
        return np.arange(delta.size)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0 or np.any(idx < 0) or np.any(idx >= delta.size) or np.unique(idx).size != idx.size:
        raise ShapeError(f"invalid parameter subset {indices!r} for dim {delta.size}")
    return idx


def gradient_fd(
    evaluate: Evaluator,
    delta: Sequence[float] | np.ndarray,
    h_rel: float = 0.01,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient over a parameter subset (default: all)."""
    delta = np.asarray(delta, dtype=np.float64)
    idx = _resolve_indices(delta, indices)
    h = _steps_for(delta, h_rel, idx)
    grad = np.empty(idx.size)
    for a, (i, hi) in enumerate(zip(idx, h)):
        plus = delta.copy()
        plus[i] += hi
        minus = delta.copy()
        minus[i] -= hi
        grad[a] = (_checked(evaluate, plus) - _checked(evaluate, minus)) / (2.0 * hi)
    return grad


@dataclass(frozen=True)
class HessianMatrix:
    """Symmetric second-difference matrix over a parameter subset."""

    matrix: np.ndarray
    base: np.ndarray  # full base point
    indices: np.ndarray  # which parameters the rows/cols refer to
    h: np.ndarray  # per-parameter probe steps

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def hessian_fd(
    evaluate: Evaluator,
    delta: Sequence[float] | np.ndarray,
    h_rel: float = 0.01,
    indices: Sequence[int] | None = None,
) -> HessianMatrix:
    """Central-difference Hessian; each (i, j) entry is computed once and
    mirrored, so the output is exactly symmetric.

    Diagonal entries use the three-point stencil, off-diagonals the
    four-point cross stencil with per-parameter steps h_i = h_rel * delta_i.
    """
    delta = np.asarray(delta, dtype=np.float64)
    idx = _resolve_indices(delta, indices)
    h = _steps_for(delta, h_rel, idx)
    n = idx.size
    center = _checked(evaluate, delta)

    def at(offsets: dict[int, float]) -> float:
        point = delta.copy()
        for a, shift in offsets.items():
            point[idx[a]] += shift
        return _checked(evaluate, point)

    matrix = np.empty((n, n))
    for a in range(n):
        f_plus = at({a: +h[a]})
        f_minus = at({a: -h[a]})
        matrix[a, a] = (f_plus - 2.0 * center + f_minus) / (h[a] * h[a])
    for a in range(n):
        for b in range(a + 1, n):
            pp = at({a: +h[a], b: +h[b]})
            pm = at({a: +h[a], b: -h[b]})
            mp = at({a: -h[a], b: +h[b]})
            mm = at({a: -h[a], b: -h[b]})
            value = (pp - pm - mp + mm) / (4.0 * h[a] * h[b])
            matrix[a, b] = value
            matrix[b, a] = value
    return HessianMatrix(matrix=matrix, base=delta, indices=idx, h=h)


@dataclass(frozen=True)
class CurvatureReport:
    k: float  # det(H) / (||grad||^2 + 1)^2
    log_abs_det: float  # log|det H|, reported because det underflows easily
    det_sign: float


def gaussian_curvature(hessian: HessianMatrix | np.ndarray, grad: np.ndarray) -> CurvatureReport:
    """Gaussian curvature of the loss surface at the probed point."""
    matrix = hessian.matrix if isinstance(hessian, HessianMatrix) else np.asarray(hessian)
    grad = np.asarray(grad, dtype=np.float64)
    if matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"Hessian must be square, got {matrix.shape}")
    if grad.size != matrix.shape[0]:
        raise ShapeError(f"gradient dim {grad.size} != Hessian dim {matrix.shape[0]}")
    det = float(np.linalg.det(matrix))
    sign, log_abs = np.linalg.slogdet(matrix)
    denom = (float(np.dot(grad, grad)) + 1.0) ** 2
    return CurvatureReport(k=det / denom, log_abs_det=float(log_abs), det_sign=float(sign))


def interaction_term(hessian: HessianMatrix | np.ndarray, eps: np.ndarray) -> float:
    """Quadratic form eps^T H eps: the second-order coupling of a noise vector."""
    matrix = hessian.matrix if isinstance(hessian, HessianMatrix) else np.asarray(hessian)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.size != matrix.shape[0]:
        raise ShapeError(f"noise dim {eps.size} != Hessian dim {matrix.shape[0]}")
    return float(eps @ matrix @ eps)


def interaction_split(hessian: HessianMatrix | np.ndarray, eps: np.ndarray) -> tuple[float, float]:
    """(diagonal, cross) parts of the interaction term, computed independently.

    The diagonal part is sum_i H_ii eps_i^2; the cross part sums every
    i != j contribution. Their sum reproduces interaction_term.
    """
    matrix = hessian.matrix if isinstance(hessian, HessianMatrix) else np.asarray(hessian)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.size != matrix.shape[0]:
        raise ShapeError(f"noise dim {eps.size} != Hessian dim {matrix.shape[0]}")
    diagonal = float(np.sum(np.diag(matrix) * eps * eps))
    off = matrix - np.diag(np.diag(matrix))
    cross = float(eps @ off @ eps)
    return diagonal, cross


# --- CSV artifacts ----------------------------------------------------------


def write_grid_csv(path, values_i, values_j, losses) -> None:
    """Grid scan as CSV: header row holds the column step sizes, first cell
    per data row holds that row's step size."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta_i\\delta_j"] + [repr(float(v)) for v in values_j])
        for vi, row in zip(values_i, losses):
            writer.writerow([repr(float(vi))] + [repr(float(x)) for x in row])


def write_matrix_csv(path, matrix: np.ndarray, labels: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(labels))
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [repr(float(x)) for x in row])


def write_vector_csv(path, vector: np.ndarray, labels: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value"])
        for label, value in zip(labels, vector):
            writer.writerow([label, repr(float(value))])
