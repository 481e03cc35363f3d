"""Joint optimization of all step sizes against the calibration loss.

Three phases. First the layer-wise calibration runs over a grid of norm
exponents, giving a family of step vectors whose network losses trace a
roughly parabolic curve in p. Second, a quadratic fit of that curve picks
the exponent whose step vector starts closest to the loss minimum. Third,
Powell's direction-set method refines all step sizes jointly: repeated
bounded line searches along an evolving direction set, no gradients. The
best point ever evaluated is tracked throughout, so the reported loss
trace is non-increasing by construction.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calibrate import DEFAULT_P_GRID, PNormSample, calibrate_model
from .errors import QtkError
from .graph import CalibSet, Model, StepVector, collect_activations, loss
from .linesearch import bracket_downhill, golden_section

__all__ = [
    "LineSearchConfig",
    "PowellConfig",
    "PowellResult",
    "PipelineConfig",
    "CalibrationResult",
    "QuadFit",
    "fit_quadratic",
    "choose_start",
    "powell_minimize",
    "joint_calibrate",
]


@dataclass(frozen=True)
class LineSearchConfig:
    """Bounded bracketing + golden-section parameters for one line search."""

    tol: float = 1e-4  # relative interval width at which golden section stops
    growth: float = 2.0  # geometric bracket expansion factor
    max_ratio: float = 0.5  # cap |lambda| * ||d|| at max_ratio * ||t||
    initial_step: float = 1.0


@dataclass(frozen=True)
class PowellConfig:
    max_outer: int = 20
    ftol: float = 1e-4  # stop when an outer iteration improves less than this (relative)
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    direction_scale: float = 0.1  # initial directions: direction_scale * |start_i| * e_i


@dataclass
class PowellResult:
    x: np.ndarray
    fx: float
    trace: list[float]  # best loss after each outer iteration, starting value first
    n_outer: int
    evals: int


class _Recorder:
    """Wraps the objective; remembers the best point and counts evaluations."""

    def __init__(self, fn: Callable[[np.ndarray], float]):
        self._fn = fn
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf
        self.evals = 0

    def __call__(self, x: np.ndarray) -> float:
        value = float(self._fn(x))
        self.evals += 1
        if value < self.best_f:
            self.best_f = value
            self.best_x = np.array(x, dtype=np.float64)
        return value


def _initial_directions(start: np.ndarray, scale: float) -> np.ndarray:
    mags = np.abs(start)
    fallback = np.linalg.norm(start) / math.sqrt(start.size) if np.any(mags > 0) else 1.0
    steps = np.where(mags > 0, mags, fallback) * scale
    return np.diag(steps)


def _line_search(
    rec: _Recorder,
    t: np.ndarray,
    f_t: float,
    d: np.ndarray,
    cfg: LineSearchConfig,
) -> tuple[np.ndarray, float, float]:
    """Minimize along t + lambda*d within the bounded bracket; never uphill.

    Returns (new point, its loss, accepted lambda); lambda is 0 when no
    probed point improved on f_t.
    """
    norm_d = float(np.linalg.norm(d))
    if norm_d == 0.0 or not math.isfinite(f_t):
        return t, f_t, 0.0
    norm_t = float(np.linalg.norm(t))
    lam_max = cfg.max_ratio * (norm_t if norm_t > 0 else 1.0) / norm_d
    if lam_max <= 0.0:
        return t, f_t, 0.0

    def f1d(lam: float) -> float:
        return rec(t + lam * d)

    step = min(cfg.initial_step, lam_max)
    a, b, _ = bracket_downhill(f1d, f_t, step, -lam_max, lam_max, growth=cfg.growth)
    result = golden_section(f1d, a, b, rel_tol=cfg.tol)
    if result.fx < f_t:
        return t + result.x * d, result.fx, result.x
    return t, f_t, 0.0


def powell_minimize(
    fn: Callable[[np.ndarray], float],
    start: Sequence[float] | np.ndarray,
    config: PowellConfig | None = None,
    directions: np.ndarray | None = None,
) -> PowellResult:
    """Derivative-free minimization by successive line searches.

    One outer iteration line-searches along every direction in the set,
    shifts the set down by one slot, installs the net displacement of the
    iteration as the newest direction, and line-searches along it. The
    direction set is reset to scaled coordinate vectors if the displacement
    degenerates. Returns the best point ever evaluated; its loss never
    exceeds the loss at `start`.
    """
    config = config or PowellConfig()
    t = np.asarray(start, dtype=np.float64).copy()
    if t.ndim != 1 or t.size < 1:
        raise QtkError(f"start point must be a non-empty vector, got shape {t.shape}")
    rec = _Recorder(fn)
    f_t = rec(t)
    if not math.isfinite(f_t):
        raise QtkError(f"objective is not finite at the start point ({f_t})")

    dirs = directions.astype(np.float64).copy() if directions is not None else _initial_directions(
        t, config.direction_scale
    )
    if dirs.shape != (t.size, t.size):
        raise QtkError(f"direction set must be {t.size}x{t.size}, got {dirs.shape}")

    trace = [rec.best_f]
    n_outer = 0
    for _ in range(config.max_outer):
        n_outer += 1
        f_begin = f_t
        # Accumulate the cycle displacement as sum(lambda_i * d_i) instead of
        # subtracting end from start: tiny displacements keep full relative
        # precision instead of being cancellation residue.
        displacement = np.zeros_like(t)
        for i in range(dirs.shape[0]):
            t, f_t, lam = _line_search(rec, t, f_t, dirs[i], config.line_search)
            if lam != 0.0:
                displacement += lam * dirs[i]
        dirs[:-1] = dirs[1:]
        dirs[-1] = displacement
        if np.linalg.norm(displacement) < 1e-12 * max(np.linalg.norm(t), 1.0):
            dirs = _initial_directions(t, config.direction_scale)
        else:
            t, f_t, _ = _line_search(rec, t, f_t, displacement, config.line_search)
        trace.append(rec.best_f)
        improvement = (f_begin - f_t) / max(abs(f_begin), 1e-300)
        if improvement < config.ftol:
            break
    best_x = rec.best_x if rec.best_x is not None else t
    return PowellResult(x=best_x, fx=rec.best_f, trace=trace, n_outer=n_outer, evals=rec.evals)


@dataclass(frozen=True)
class QuadFit:
    """Parabola fitted to (p, loss) samples, and the chosen exponent."""

    a: float
    b: float
    c: float
    p_best: float
    samples: tuple[tuple[float, float], ...]


def fit_quadratic(samples: Sequence[tuple[float, float]]) -> QuadFit:
    """Least-squares parabola through (p, loss) points.

    Convex fits (a > 0) place p_best at the vertex, clamped to the sampled
    range; non-convex fits fall back to the sampled p with least loss.
    """
    ps = np.array([p for p, _ in samples], dtype=np.float64)
    losses = np.array([v for _, v in samples], dtype=np.float64)
    if np.unique(ps).size < 3:
        raise QtkError(f"quadratic fit needs >= 3 distinct p values, got {np.unique(ps).size}")
    a, b, c = np.polyfit(ps, losses, 2)
    if a > 0:
        p_best = float(np.clip(-b / (2 * a), ps.min(), ps.max()))
    else:
        p_best = float(ps[int(np.argmin(losses))])
    return QuadFit(a=float(a), b=float(b), c=float(c), p_best=p_best, samples=tuple(zip(ps, losses)))


def choose_start(
    samples: Sequence[PNormSample],
    evaluate: Callable[[StepVector], float],
    calibrate_at: Callable[[float], StepVector],
) -> tuple[float, StepVector, float]:
    """Pick the joint optimizer's starting point from the p-trajectory.

    Fits the parabola, calibrates at its chosen exponent, evaluates that
    candidate, and returns the overall argmin among the candidate and all
    samples (so the start is never worse than the best sampled point).
    """
    if any(s.loss is None for s in samples):
        raise QtkError("all p-trajectory samples need an evaluated loss")
    fit = fit_quadratic([(s.p, s.loss) for s in samples])
    steps_fit = calibrate_at(fit.p_best)
    loss_fit = evaluate(steps_fit)
    best_p, best_steps, best_loss = fit.p_best, steps_fit, loss_fit
    for s in samples:
        if s.loss < best_loss:
            best_p, best_steps, best_loss = s.p, s.steps, s.loss
    return best_p, best_steps, best_loss


@dataclass(frozen=True)
class PipelineConfig:
    p_grid: tuple[float, ...] = DEFAULT_P_GRID
    powell: PowellConfig = field(default_factory=PowellConfig)
    threads: int = 1


@dataclass
class CalibrationResult:
    steps: StepVector
    p_best: float
    p_samples: list[tuple[float, float]]  # (p, loss) for every sampled exponent
    loss_trace: list[float]  # non-increasing best loss across the whole run
    initial_loss: float  # loss at the chosen starting step vector
    final_loss: float
    timings: dict[str, float]


def joint_calibrate(
    model: Model,
    calib: CalibSet,
    bits_w: int | None,
    bits_a: int | None,
    config: PipelineConfig | None = None,
) -> CalibrationResult:
    """Full calibration pipeline: layer-wise sweep, parabola pick, joint refine.

    bits of None disable that side of the quantization. The final loss never
    exceeds the loss of the starting point, which never exceeds the best
    layer-wise loss over the p grid.
    """
    config = config or PipelineConfig()
    threads = config.threads
    timings: dict[str, float] = {}

    def evaluate(steps: StepVector) -> float:
        return loss(model, calib, steps, threads=threads)

    t0 = time.perf_counter()
    acts = (
        collect_activations(model, calib, threads=threads)
        if bits_a is not None and model.activation_points()
        else None
    )

    def calibrate_at(p: float) -> StepVector:
        return calibrate_model(model, calib, bits_w, bits_a, p, activations=acts, threads=threads)

    samples: list[PNormSample] = []
    for p in config.p_grid:
        steps_p = calibrate_at(p)
        samples.append(PNormSample(p=p, steps=steps_p, loss=evaluate(steps_p)))
    timings["layerwise"] = time.perf_counter() - t0

    if len(samples[0].steps) == 0:
        # Nothing is quantized: report the FP32 loss and an empty step vector.
        fp_loss = loss(model, calib, None, threads=threads)
        timings["quadratic"] = 0.0
        timings["joint"] = 0.0
        return CalibrationResult(
            steps=samples[0].steps,
            p_best=float(config.p_grid[0]),
            p_samples=[(s.p, s.loss) for s in samples],
            loss_trace=[fp_loss],
            initial_loss=fp_loss,
            final_loss=fp_loss,
            timings=timings,
        )

    t1 = time.perf_counter()
    p_best, steps0, loss0 = choose_start(samples, evaluate, calibrate_at)
    timings["quadratic"] = time.perf_counter() - t1

    trace = list(np.minimum.accumulate([s.loss for s in samples]))
    trace.append(min(trace[-1], loss0))

    t2 = time.perf_counter()
    if config.powell.max_outer > 0:
        template = steps0

        def objective(deltas: np.ndarray) -> float:
            if np.any(deltas <= 0.0) or not np.all(np.isfinite(deltas)):
                return math.inf
            return evaluate(template.with_deltas(deltas))

        result = powell_minimize(objective, steps0.deltas, config.powell)
        final_steps = template.with_deltas(result.x)
        final_loss = result.fx
        trace.extend(min(trace[-1], v) for v in result.trace[1:])
    else:
        final_steps = steps0
        final_loss = loss0
    timings["joint"] = time.perf_counter() - t2

    return CalibrationResult(
        steps=final_steps,
        p_best=p_best,
        p_samples=[(s.p, s.loss) for s in samples],
        loss_trace=trace,
        initial_loss=loss0,
        final_loss=final_loss,
        timings=timings,
    )
