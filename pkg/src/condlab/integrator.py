"""Embedded Dormand-Prince 5(4) Runge-Kutta stepper with error control.

The stepper works on flat float64 state vectors. Drivers in
:mod:`condlab.effective` and :mod:`condlab.matrix` own the stopping logic
(energy ceiling, minimum step, snapshot decimation); :func:`solve_on_grid`
is a plain driver that lands exactly on a set of output times.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import NumericalFailure, PreconditionError

RHS = Callable[[np.ndarray], np.ndarray]

# Butcher tableau (autonomous systems only: the node vector is not needed)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class DormandPrince:
    """Single-step engine for ``dy/dt = fun(y)``.

    ``attempt`` performs one trial step and returns the proposed state, the
    scaled error norm (accept when ``<= 1``) and the derivative at the new
    state, which is reused as the first stage of the next step (FSAL).
    """

    def __init__(self, fun: RHS, rel_tol: float, abs_tol: float):
        if not (rel_tol > 0 and abs_tol > 0):
            raise PreconditionError("tolerances must be positive")
        self.fun = fun
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol
        self.evaluations = 0

    def rhs(self, y: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        return self.fun(y)

    def attempt(self, y: np.ndarray, f0: np.ndarray, h: float):
        k = [f0]
        for row in _A[1:]:
            incr = row[0] * k[0]
            for coef, ki in zip(row[1:], k[1:]):
                if coef != 0.0:
                    incr = incr + coef * ki
            k.append(self.rhs(y + h * incr))
        # the last stage is evaluated at the 5th order solution
        y_new = y + h * sum(b * ki for b, ki in zip(_B5[:6], k[:6]) if b != 0.0)
        f_new = k[-1]
        err = h * sum(e * ki for e, ki in zip(_E, k) if e != 0.0)
        scale = self.abs_tol + self.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        with np.errstate(over="ignore", invalid="ignore"):
            err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not math.isfinite(err_norm):
            err_norm = math.inf
        return y_new, err_norm, f_new

    def initial_step(self, y: np.ndarray, f0: np.ndarray, h_max: float = math.inf) -> float:
        """Starting step size heuristic (Hairer, Norsett and Wanner, II.4)."""
        scale = self.abs_tol + self.rel_tol * np.abs(y)
        d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
        d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
        if d0 < 1e-5 or d1 < 1e-5:
            h0 = 1e-6
        else:
            h0 = 0.01 * d0 / d1
        h0 = min(h0, h_max)
        f1 = self.rhs(y + h0 * f0)
        d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1 / 5)
        return min(100 * h0, h1, h_max)

    @staticmethod
    def next_step(h: float, err_norm: float, accepted: bool) -> float:
        if err_norm == 0.0:
            factor = MAX_FACTOR
        elif not math.isfinite(err_norm):
            factor = MIN_FACTOR
        else:
            factor = SAFETY * err_norm ** (-1 / 5)
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
        if not accepted:
            factor = min(factor, 1.0)
        return h * factor


def solve_on_grid(
    fun: RHS,
    y0: np.ndarray,
    times: np.ndarray,
    rel_tol: float = 1e-10,
    abs_tol: float = 1e-12,
    min_step: float = 1e-14,
    max_steps: int = 1_000_000,
) -> np.ndarray:
    """Integrate ``dy/dt = fun(y)`` and return the states at ``times``.

    ``times`` must be non-decreasing and start at the initial time. Steps are
    clipped so every output time is hit exactly.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) < 0):
        raise PreconditionError("output times must be a non-empty, non-decreasing sequence")
    stepper = DormandPrince(fun, rel_tol, abs_tol)
    y = np.array(y0, dtype=np.float64)
    out = np.empty((times.size, y.size))
    out[0] = y
    t = float(times[0])
    f = stepper.rhs(y)
    h = stepper.initial_step(y, f, h_max=max(float(times[-1] - t), min_step))
    steps = 0
    for idx in range(1, times.size):
        target = float(times[idx])
        while t < target:
            if steps >= max_steps:
                raise NumericalFailure(f"exceeded {max_steps} steps before t={target}")
            step = min(h, target - t)
            y_new, err, f_new = stepper.attempt(y, f, step)
            if err <= 1.0:
                t = target if step == target - t else t + step
                y, f = y_new, f_new
                steps += 1
                if not np.all(np.isfinite(y)):
                    raise NumericalFailure(f"non-finite state at t={t}")
                h = stepper.next_step(step, err, True)
            else:
                h = stepper.next_step(step, err, False)
            if h < min_step:
                raise NumericalFailure(f"step size underflow at t={t}")
        out[idx] = y
    return out
