"""Scalar minimization helpers: golden-section search and bracketing.

Used by the per-tensor step-size calibration (scan + refine) and by the
direction-set optimizer's line searches. All routines are derivative-free
and tolerate +inf objective values (used to reject infeasible points).
"""

from __future__ import annotations

import math
from typing import Callable

__all__ = ["golden_section", "bracket_downhill", "ScalarResult"]

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0  # 1/phi ~ 0.618
INV_PHI2 = (3.0 - math.sqrt(5.0)) / 2.0  # 1/phi^2 ~ 0.382


class ScalarResult:
    __slots__ = ("x", "fx", "evals")

    def __init__(self, x: float, fx: float, evals: int):
        self.x = x
        self.fx = fx
        self.evals = evals


def golden_section(
    f: Callable[[float], float],
    a: float,
    b: float,
    rel_tol: float = 1e-5,
    max_iter: int = 200,
    polish: int = 2,
) -> ScalarResult:
    """Golden-section search on [a, b]; returns the best point evaluated.

    The interval shrinks until its width falls below rel_tol times the
    initial width (or max_iter splits); `polish` rounds of parabolic
    interpolation then sharpen the result, which makes the search exact on
    quadratic objectives. The objective need not be unimodal: the returned
    point is the argmin over all probes and always stays inside [a, b], so
    the result can never be worse than any point the search looked at.
    """
    if a > b:
        a, b = b, a
    lo, hi = a, b
    width0 = b - a
    evals = 0
    best_x, best_f = a, math.inf

    h = b - a
    if h <= 0.0:
        return ScalarResult(a, f(a), 1)
    c = a + INV_PHI2 * h
    d = a + INV_PHI * h
    fc, fd = f(c), f(d)
    evals += 2
    for x, fx in ((c, fc), (d, fd)):
        if fx < best_f:
            best_x, best_f = x, fx
    for _ in range(max_iter):
        if h <= rel_tol * width0:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            h = b - a
            c = a + INV_PHI2 * h
            fc = f(c)
            evals += 1
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            h = b - a
            d = a + INV_PHI * h
            fd = f(d)
            evals += 1
            if fd < best_f:
                best_x, best_f = d, fd
    # Parabolic polish around the closing triple (c and d are interior).
    x0, f0, x1, f1 = (c, fc, d, fd) if fc <= fd else (d, fd, c, fc)
    x2 = a if abs(x0 - a) > abs(x0 - b) else b
    f2 = f(x2)
    evals += 1
    if f2 < best_f:
        best_x, best_f = x2, f2
    for _ in range(max(polish, 0)):
        if not (math.isfinite(f0) and math.isfinite(f1) and math.isfinite(f2)):
            break
        d1, d2 = x1 - x0, x2 - x0
        num = d1 * d1 * (f2 - f0) - d2 * d2 * (f1 - f0)
        den = d1 * (f2 - f0) - d2 * (f1 - f0)
        if den == 0.0:
            break
        v = x0 + 0.5 * num / den
        v = min(max(v, lo), hi)
        if v in (x0, x1, x2):
            break
        fv = f(v)
        evals += 1
        if fv < best_f:
            best_x, best_f = v, fv
        # Keep the three lowest points seen for the next fit.
        if fv < f0:
            x0, f0, x1, f1, x2, f2 = v, fv, x0, f0, x1, f1
        elif fv < f1:
            x1, f1, x2, f2 = v, fv, x1, f1
        elif fv < f2:
            x2, f2 = v, fv
        else:
            break
    return ScalarResult(best_x, best_f, evals)


def bracket_downhill(
    f: Callable[[float], float],
    f0: float,
    step: float,
    lo: float,
    hi: float,
    growth: float = 2.0,
) -> tuple[float, float, int]:
    """Expand geometrically from 0 to bracket a descent of f along [lo, hi].

    f0 is f(0), already evaluated by the caller. Probes +step and -step;
    whichever side descends is expanded by `growth` until the value rises
    again or the interval bound is hit, yielding a bracket that contains a
    local minimum. If neither side descends, returns the tight
    (-step, +step) interval clipped to the bounds (the minimum sits near 0).
    Returns (a, b, evals) with a < b.
    """
    evals = 0

    def probe(x: float) -> float:
        nonlocal evals
        evals += 1
        return f(x)

    step = abs(step)
    right = min(step, hi)
    left = max(-step, lo)
    f_r = probe(right) if right > 0 else math.inf
    f_l = probe(left) if left < 0 else math.inf

    if f_r >= f0 and f_l >= f0:
        return left, right, evals

    if f_r < f_l:
        direction, x_cur, f_cur, bound = 1.0, right, f_r, hi
    else:
        direction, x_cur, f_cur, bound = -1.0, left, f_l, lo

    x_prev = 0.0
    while True:
        x_next = x_cur * growth
        x_next = min(x_next, bound) if direction > 0 else max(x_next, bound)
        if x_next == x_cur:  # bound reached; minimum may sit on it
            break
        f_next = probe(x_next)
        if f_next >= f_cur:  # rose again: (x_prev, x_next) brackets the dip
            x_cur = x_next
            break
        x_prev = x_cur
        x_cur, f_cur = x_next, f_next
    a, b = (x_prev, x_cur) if direction > 0 else (x_cur, x_prev)
    return a, b, evals
