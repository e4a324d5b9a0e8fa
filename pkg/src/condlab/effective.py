"""Effective gradient-ascent dynamics of a three-layer network at small scale.

The state is the triple ``(a, b, c)`` with ``a, c`` of length ``m`` and ``b``
an ``m x m`` matrix. The flow

    da/dt = b c,    db/dt = a c^T,    dc/dt = b^T a

is the gradient ascent of the energy ``E = a^T b c``. This module integrates
the flow up to blow-up, measures the conserved quantities, and evaluates the
energy bounds that bracket the blow-up time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import PreconditionError, ShapeError
from .integrator import DormandPrince

__all__ = [
    "EffectiveState",
    "StopReason",
    "IntegrateOptions",
    "Trajectory",
    "ConservationReport",
    "BlowUpAssumption",
    "BoundCheck",
    "BlowUpBracket",
    "energy",
    "derivative",
    "integrate",
    "conservation_check",
    "check_blowup_assumption",
    "lower_bound_check",
    "blowup_bracket",
    "random_state",
    "balanced_example",
    "scalar_state",
]

ASSUMPTION_TOL = 1e-12


@dataclass(frozen=True)
class EffectiveState:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(-1)
        c = np.array(self.c, dtype=np.float64).reshape(-1)
        b = np.array(self.b, dtype=np.float64)
        if b.ndim == 1 and a.size == 1:
            b = b.reshape(1, 1)
        m = a.size
        if m < 1 or c.size != m or b.shape != (m, m):
            raise ShapeError(f"inconsistent shapes a={a.shape}, b={b.shape}, c={c.shape}")
        if self.t < 0:
            raise PreconditionError("time must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "t", float(self.t))

    @property
    def m(self) -> int:
        return self.a.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a, self.b.ravel(), self.c])

    @classmethod
    def from_flat(cls, y: np.ndarray, m: int, t: float = 0.0) -> "EffectiveState":
        return cls(y[:m].copy(), y[m : m + m * m].reshape(m, m).copy(), y[m + m * m :].copy(), t)

    def scaled(self, s: float) -> "EffectiveState":
        return EffectiveState(s * self.a, s * self.b, s * self.c, self.t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.c)))


def scalar_state(value: float = 1.0) -> EffectiveState:
    """The ``m = 1`` state ``a = b = c = value``; blows up at ``t = 1/value``."""
    return EffectiveState([value], [[value]], [value])


def balanced_example() -> EffectiveState:
    """Balanced initial data with equal norms of ``a`` and ``c`` that does not blow up."""
    return EffectiveState([1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]], [-1.0, 0.0])


def random_state(m: int, rng: np.random.Generator, std: float = 1.0) -> EffectiveState:
    """Gaussian state; entries drawn in the order a, b (row-major), c."""
    a = rng.normal(0.0, std, m)
    b = rng.normal(0.0, std, (m, m))
    c = rng.normal(0.0, std, m)
    return EffectiveState(a, b, c)


def energy(s: EffectiveState) -> float:
    return float(s.a @ s.b @ s.c)


def derivative(s: EffectiveState):
    """Right-hand side ``(b c, a c^T, b^T a)`` of the effective flow."""
    return s.b @ s.c, np.outer(s.a, s.c), s.b.T @ s.a


def _flat_rhs(m: int):
    n_b = m * m

    def rhs(y: np.ndarray) -> np.ndarray:
        a = y[:m]
        b = y[m : m + n_b].reshape(m, m)
        c = y[m + n_b :]
        out = np.empty_like(y)
        out[:m] = b @ c
        out[m : m + n_b] = np.outer(a, c).ravel()
        out[m + n_b :] = b.T @ a
        return out

    return rhs


def _flat_energy(m: int):
    n_b = m * m

    def fn(y: np.ndarray) -> float:
        return float(y[:m] @ y[m : m + n_b].reshape(m, m) @ y[m + n_b :])

    return fn


class StopReason(str, Enum):
    REACHED_T_END = "reached_t_end"
    ENERGY_CEILING = "energy_ceiling"
    MIN_STEP = "min_step"
    NON_FINITE = "non_finite"


@dataclass(frozen=True)
class IntegrateOptions:
    """Integration controls.

    ``sample_stride`` of ``None`` means ``horizon / 512`` where the horizon is
    ``t_end`` when finite and otherwise an estimate of the blow-up time.
    Besides the time stride, a snapshot is taken whenever a positive energy has
    grown by ``energy_factor`` since the previous snapshot, so the approach
    to blow-up stays resolved. ``ceiling_overshoot`` is the relative band above
    ``energy_ceiling`` that the final step is shrunk to land in.
    """

    t_end: float = math.inf
    energy_ceiling: float = 1e9
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    min_step: float = 1e-14
    sample_stride: float | None = None
    energy_factor: float = 1.25
    ceiling_overshoot: float = 1e-3
    max_steps: int = 5_000_000

    def validate(self) -> None:
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.min_step > 0):
            raise PreconditionError("tolerances and min_step must be positive")
        if not self.energy_ceiling > 0:
            raise PreconditionError("energy_ceiling must be positive")
        if not self.t_end > 0:
            raise PreconditionError("t_end must be positive")
        if self.sample_stride is not None and not self.sample_stride > 0:
            raise PreconditionError("sample_stride must be positive")
        if not self.energy_factor > 1:
            raise PreconditionError("energy_factor must exceed 1")
        if self.max_steps < 1:
            raise PreconditionError("max_steps must be positive")


@dataclass
class RawRun:
    times: list
    states: list
    energies: list
    steps: list
    stop_reason: StopReason
    stride: float


def run_monitored(fun, energy_fn, y0, t0, opts: IntegrateOptions, horizon_hint: float) -> RawRun:
    """Adaptive DOPRI5 loop with energy-ceiling, min-step and finiteness stops."""
    opts.validate()
    y = np.array(y0, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise PreconditionError("initial state must be finite")
    horizon = opts.t_end - t0 if math.isfinite(opts.t_end) else horizon_hint
    stride = opts.sample_stride if opts.sample_stride is not None else horizon / 512.0
    stepper = DormandPrince(fun, opts.rel_tol, opts.abs_tol)
    ceiling = opts.energy_ceiling
    band = ceiling * (1.0 + opts.ceiling_overshoot)

    t = float(t0)
    e = energy_fn(y)
    times, states, energies, steps = [t], [y], [e], [0.0]
    if abs(e) >= ceiling:
        return RawRun(times, states, energies, steps, StopReason.ENERGY_CEILING, stride)
    f = stepper.rhs(y)
    h = stepper.initial_step(y, f, h_max=max(min(horizon, opts.t_end - t), opts.min_step))
    last_t, last_e = t, e
    pending = None  # latest accepted state not yet stored as a snapshot
    reason = StopReason.REACHED_T_END
    n_steps = 0

    while True:
        if t >= opts.t_end:
            reason = StopReason.REACHED_T_END
            break
        if h < opts.min_step:
            reason = StopReason.MIN_STEP
            break
        if n_steps >= opts.max_steps:
            raise PreconditionError(f"max_steps={opts.max_steps} exhausted at t={t}")
        step = min(h, opts.t_end - t)
        y_new, err, f_new = stepper.attempt(y, f, step)
        if not np.all(np.isfinite(y_new)):
            # a non-finite candidate after a shrink to min_step means the flow left float range
            if step <= opts.min_step:
                reason = StopReason.NON_FINITE
                break
            h = max(step * 0.2, opts.min_step * 0.999)
            continue
        if err > 1.0:
            h = stepper.next_step(step, err, False)
            continue
        e_new = energy_fn(y_new)
        if abs(e_new) > band:
            y_new, f_new, e_new, step = _land_on_ceiling(stepper, energy_fn, y, f, e, step, ceiling, band)
        t = opts.t_end if step == opts.t_end - t else t + step
        y, f, e = y_new, f_new, e_new
        n_steps += 1
        h = stepper.next_step(step, err, True)
        hit_ceiling = abs(e) >= ceiling
        grown = e > 0 and (last_e <= 0 or e >= opts.energy_factor * last_e)
        if t - last_t >= stride or grown or hit_ceiling or t >= opts.t_end:
            times.append(t)
            states.append(y)
            energies.append(e)
            steps.append(step)
            last_t, last_e = t, e
            pending = None
        else:
            pending = (t, y, e, step)
        if hit_ceiling:
            reason = StopReason.ENERGY_CEILING
            break
        if step < opts.min_step:
            reason = StopReason.MIN_STEP
            break

    if pending is not None:
        times.append(pending[0])
        states.append(pending[1])
        energies.append(pending[2])
        steps.append(pending[3])
    return RawRun(times, states, energies, steps, reason, stride)


def _land_on_ceiling(stepper, energy_fn, y, f, e, step, ceiling, band):
    """Shrink an overshooting step until the energy lands in ``[ceiling, band]``.

    Safeguarded secant search on ``|E|^(-1/3)``, which is close to linear in
    time near blow-up. Every trial is a fresh step from ``y``.
    """
    gc = ceiling ** (-1 / 3)
    lo, g_lo = 0.0, (abs(e) ** (-1 / 3) if e != 0 else math.inf)
    y_hi, _, f_hi = stepper.attempt(y, f, step)
    hi, e_hi = step, energy_fn(y_hi)
    best = (y_hi, f_hi, e_hi, hi)
    for it in range(200):
        g_hi = abs(e_hi) ** (-1 / 3) if np.isfinite(e_hi) else 0.0
        trial = 0.5 * (lo + hi)
        if it % 3 != 2 and math.isfinite(g_lo) and g_lo > g_hi:
            guess = lo + (hi - lo) * (g_lo - gc) / (g_lo - g_hi)
            if lo < guess < hi:
                trial = guess
        y_try, _, f_try = stepper.attempt(y, f, trial)
        e_try = energy_fn(y_try)
        if np.all(np.isfinite(y_try)) and abs(e_try) >= ceiling:
            best = (y_try, f_try, e_try, trial)
            if abs(e_try) <= band:
                return best
            hi, e_hi = trial, e_try
        else:
            lo, g_lo = trial, abs(e_try) ** (-1 / 3) if e_try != 0 else math.inf
        if hi - lo <= 1e-15 * hi:
            break
    return best


@dataclass(frozen=True)
class Trajectory:
    snapshots: tuple
    energies: np.ndarray
    step_sizes: np.ndarray
    stop_reason: StopReason
    sample_stride: float = field(default=math.nan)
    energy_ceiling: float = field(default=math.nan)

    def __post_init__(self):
        if len(self.snapshots) == 0:
            raise PreconditionError("a trajectory needs at least one snapshot")

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def m(self) -> int:
        return self.snapshots[0].m

    @property
    def final(self) -> EffectiveState:
        return self.snapshots[-1]

    def __len__(self) -> int:
        return len(self.snapshots)


def _horizon_hint(s0: EffectiveState) -> float:
    e0 = energy(s0)
    if e0 > 0:
        return e0 ** (-1 / 3)
    scale = np.linalg.norm(s0.a) * np.linalg.norm(s0.b) * np.linalg.norm(s0.c)
    return scale ** (-1 / 3) if scale > 0 else 1.0


def integrate(s0: EffectiveState, opts: IntegrateOptions | None = None, **overrides) -> Trajectory:
    """Integrate the effective flow from ``s0``.

    Stops at ``t_end``, when ``|E| >= energy_ceiling``, when the accepted step
    falls below ``min_step``, or when the state stops being finite.
    """
    if opts is None:
        opts = IntegrateOptions(**overrides)
    elif overrides:
        opts = replace(opts, **overrides)
    m = s0.m
    raw = run_monitored(_flat_rhs(m), _flat_energy(m), s0.flat(), s0.t, opts, _horizon_hint(s0))
    snaps = tuple(EffectiveState.from_flat(y, m, t) for t, y in zip(raw.times, raw.states))
    return Trajectory(
        snaps, np.array(raw.energies), np.array(raw.steps), raw.stop_reason, raw.stride, opts.energy_ceiling
    )


@dataclass(frozen=True)
class ConservationReport:
    per_row_drift: np.ndarray
    per_col_drift: np.ndarray
    global_drift: float

    @property
    def max_drift(self) -> float:
        return float(max(self.per_row_drift.max(), self.per_col_drift.max(), self.global_drift))


def conservation_check(traj: Trajectory) -> ConservationReport:
    """Drift of the quantities conserved by the flow, relative to the first snapshot.

    Conserved: ``a_k^2 - ||b_k||^2`` (rows), ``c_k^2 - ||b^k||^2`` (columns), and
    the pairwise differences of ``||a||^2``, ``||b||_F^2``, ``||c||^2``.
    """
    rows = np.array([s.a**2 - np.sum(s.b**2, axis=1) for s in traj.snapshots])
    cols = np.array([s.c**2 - np.sum(s.b**2, axis=0) for s in traj.snapshots])
    na = np.array([s.a @ s.a for s in traj.snapshots])
    nb = np.array([np.sum(s.b**2) for s in traj.snapshots])
    nc = np.array([s.c @ s.c for s in traj.snapshots])
    pairs = np.stack([na - nb, nb - nc, na - nc], axis=1)
    return ConservationReport(
        per_row_drift=np.max(np.abs(rows - rows[0]), axis=0),
        per_col_drift=np.max(np.abs(cols - cols[0]), axis=0),
        global_drift=float(np.max(np.abs(pairs - pairs[0]))),
    )


@dataclass(frozen=True)
class BlowUpAssumption:
    holds: bool
    norm_gap: float
    discriminant: float


def check_blowup_assumption(s0: EffectiveState, tol: float = ASSUMPTION_TOL) -> BlowUpAssumption:
    """Sufficient condition on initial data for finite-time blow-up.

    Requires ``||a|| != ||c||`` and a non-zero discriminant built from the
    initial velocities; both comparisons use the absolute tolerance ``tol``.
    An exactly zero discriminant is reported as ``holds=False``.
    """
    da, _, dc = derivative(s0)
    na2, nc2 = float(s0.a @ s0.a), float(s0.c @ s0.c)
    gap = math.sqrt(na2) - math.sqrt(nc2)
    weight = nc2 if gap >= 0 else na2
    disc = float(da @ da - dc @ dc - weight * (nc2 - na2))
    holds = abs(gap) > tol and abs(disc) > tol
    return BlowUpAssumption(holds, gap, disc)


@dataclass(frozen=True)
class BoundCheck:
    valid: bool
    worst_margin: float


def lower_bound_check(traj: Trajectory, slack: float = 1e-6) -> BoundCheck:
    """Check ``E(t) >= (E(0)^(-1/3) - t)^(-3)`` while the right side is finite."""
    e0 = float(traj.energies[0])
    if not e0 > 0:
        raise PreconditionError("lower bound needs a positive initial energy")
    t0 = traj.snapshots[0].t
    g0 = e0 ** (-1 / 3)
    valid, worst = True, math.inf
    for s, e in zip(traj.snapshots, traj.energies):
        dt = s.t - t0
        if dt >= g0:
            continue
        bound = (g0 - dt) ** -3
        worst = min(worst, e - bound)
        if e < bound * (1.0 - slack):
            valid = False
    return BoundCheck(valid, worst)


@dataclass(frozen=True)
class BlowUpBracket:
    """Bracket on the blow-up time.

    ``c_estimate`` is an empirical surrogate for the growth constant of the
    energy upper bound, fitted on the last 20% of snapshots; it is not the
    constant whose existence the theory asserts.
    """

    e0: float
    upper_time: float | None
    lower_time: float | None
    c_estimate: float
    assumption_holds: bool
    fit_from_t: float | None = None

    def consistent(self, tol: float = 1e-9) -> bool:
        if self.upper_time is None or self.lower_time is None:
            return True
        return self.lower_time <= self.upper_time + tol * max(1.0, abs(self.upper_time))


def growth_rates(times: np.ndarray, energies: np.ndarray) -> np.ndarray:
    """Finite-difference estimate of ``E' / (3 E^(4/3))`` between consecutive positive snapshots.

    Uses ``-(d/dt) E^(-1/3)``, which equals that ratio; NaN where either end
    of the interval has non-positive energy.
    """
    times = np.asarray(times, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    out = np.full(max(times.size - 1, 0), np.nan)
    for k in range(times.size - 1):
        e1, e2 = energies[k], energies[k + 1]
        dt = times[k + 1] - times[k]
        if e1 > 0 and e2 > 0 and dt > 0:
            out[k] = (e1 ** (-1 / 3) - e2 ** (-1 / 3)) / dt
    return out


def blowup_bracket(traj: Trajectory, c_constant: float | None = None) -> BlowUpBracket:
    times, energies = traj.times, traj.energies
    e0 = float(energies[0])
    positive = np.flatnonzero(energies > 0)
    upper = None
    if positive.size:
        k0 = positive[0]
        upper = float(times[k0] + energies[k0] ** (-1 / 3))

    n = len(traj)
    start = max(0, n - max(2, math.ceil(0.2 * n)))
    rates = growth_rates(times[start:], energies[start:])
    finite = rates[np.isfinite(rates)]
    c_est = max(1.0, float(finite.max())) if finite.size else 1.0
    fit_from = None
    if finite.size:
        first = start + int(np.flatnonzero(np.isfinite(rates))[0])
        fit_from = float(times[first])

    c_use = c_est if c_constant is None else float(c_constant)
    lower = None
    if energies[-1] > 0:
        lower = float(times[-1] + energies[-1] ** (-1 / 3) / c_use)
    return BlowUpBracket(
        e0=e0,
        upper_time=upper,
        lower_time=lower,
        c_estimate=c_est,
        assumption_holds=check_blowup_assumption(traj.snapshots[0]).holds,
        fit_from_t=fit_from,
    )
