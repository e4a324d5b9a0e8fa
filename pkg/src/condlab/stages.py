"""Final stage condition, angle diagnostics and the condensation verdict.

All functions evaluate states of the effective flow
(:class:`condlab.effective.EffectiveState`) or trajectories of it.
Column ``i`` of ``b`` is written ``b^i`` and row ``i`` is ``b_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .effective import EffectiveState, StopReason, Trajectory, derivative
from .errors import PreconditionError

__all__ = [
    "FscReport",
    "AngleDiagnostics",
    "Partition",
    "CondensationVerdict",
    "fsc_indicators",
    "check_fsc",
    "fsc_persistence",
    "angles",
    "partition",
    "condensation_verdict",
    "upper_bound_check",
    "fsc_series",
    "angle_series",
]


@dataclass(frozen=True)
class FscReport:
    holds: bool
    cond1_positive_count: int
    cond2_positive_count: int
    min_margin: float
    t: float


def fsc_indicators(s: EffectiveState):
    """Return ``(cond1, cond2)`` indicator arrays.

    ``cond1`` has the ``2m`` values ``c_i a^T b^i`` followed by ``a_i b_i c``;
    ``cond2`` has the ``2 m^2`` values ``<c_i b^i, c_j b^j>`` followed by
    ``<a_i b_i, a_j b_j>``.
    """
    a, b, c = s.a, s.b, s.c
    cond1 = np.concatenate([c * (a @ b), a * (b @ c)])
    cond2 = np.concatenate([(np.outer(c, c) * (b.T @ b)).ravel(), (np.outer(a, a) * (b @ b.T)).ravel()])
    return cond1, cond2


def check_fsc(s: EffectiveState, strict_margin: float = 0.0) -> FscReport:
    cond1, cond2 = fsc_indicators(s)
    n1 = int(np.sum(cond1 > strict_margin))
    n2 = int(np.sum(cond2 > strict_margin))
    m = s.m
    return FscReport(
        holds=n1 == 2 * m and n2 == 2 * m * m,
        cond1_positive_count=n1,
        cond2_positive_count=n2,
        min_margin=float(min(cond1.min(), cond2.min())),
        t=s.t,
    )


@dataclass(frozen=True)
class Persistence:
    first_hold_t: float | None
    violated_after: bool


def fsc_persistence(traj: Trajectory, strict_margin: float = 0.0) -> Persistence:
    first, violated = None, False
    for s in traj.snapshots:
        holds = check_fsc(s, strict_margin).holds
        if first is None:
            if holds:
                first = s.t
        elif not holds:
            violated = True
    return Persistence(first, violated)


@dataclass(frozen=True)
class AngleDiagnostics:
    """Cosines between the columns ``c_i b^i``, ``a`` and ``da/dt`` plus norm ratios.

    Entries whose denominator fell below the degeneracy tolerance are set to
    0 and marked in the matching ``*_degenerate`` mask.
    """

    xi: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    zeta: float
    adot_over_c2: float
    adot_over_a2: float
    bi_over_ci: np.ndarray
    xi_degenerate: np.ndarray
    psi_degenerate: np.ndarray
    phi_degenerate: np.ndarray
    zeta_degenerate: bool
    ratio_degenerate: np.ndarray  # [adot_over_c2, adot_over_a2]
    bi_over_ci_degenerate: np.ndarray


def _safe_ratio(num, den, tol):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    bad = np.abs(den) < tol
    out = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    return out, bad


def angles(s: EffectiveState, degenerate_tol: float = 1e-12) -> AngleDiagnostics:
    a, b, c = s.a, s.b, s.c
    adot, _, _ = derivative(s)
    cols = b * c[None, :]  # column i is c_i b^i
    col_norm = np.linalg.norm(cols, axis=0)
    na, nadot, nc = np.linalg.norm(a), np.linalg.norm(adot), np.linalg.norm(c)

    xi, xi_bad = _safe_ratio(cols.T @ cols, np.outer(col_norm, col_norm), degenerate_tol)
    psi, psi_bad = _safe_ratio(adot @ cols, nadot * col_norm, degenerate_tol)
    phi, phi_bad = _safe_ratio(a @ cols, na * col_norm, degenerate_tol)
    zeta, zeta_bad = _safe_ratio(a @ adot, na * nadot, degenerate_tol)
    ratios, ratio_bad = _safe_ratio([nadot, nadot], [nc**2, na**2], degenerate_tol)
    bi_ci, bi_bad = _safe_ratio(np.sum(b**2, axis=0), c**2, degenerate_tol)
    clip = lambda x: np.clip(x, -1.0, 1.0)
    return AngleDiagnostics(
        xi=clip(xi),
        psi=clip(psi),
        phi=clip(phi),
        zeta=float(clip(zeta)),
        adot_over_c2=float(ratios[0]),
        adot_over_a2=float(ratios[1]),
        bi_over_ci=bi_ci,
        xi_degenerate=xi_bad,
        psi_degenerate=psi_bad,
        phi_degenerate=phi_bad,
        zeta_degenerate=bool(zeta_bad),
        ratio_degenerate=ratio_bad,
        bi_over_ci_degenerate=bi_bad,
    )


@dataclass(frozen=True)
class Partition:
    """Divergent (``c1``) and bounded (``c2``) indices, 0-based."""

    c1: tuple
    c2: tuple
    threshold_used: float


def partition(traj: Trajectory, rel_threshold: float = 0.01) -> Partition:
    """Split indices by ``|c_i| >= rel_threshold * max_j |c_j|`` at the last snapshot."""
    if traj.stop_reason not in (StopReason.ENERGY_CEILING, StopReason.MIN_STEP):
        raise PreconditionError(
            f"partition needs a trajectory that reached blow-up, got stop_reason={traj.stop_reason.value}"
        )
    c = np.abs(traj.final.c)
    threshold = rel_threshold * float(c.max())
    c1 = tuple(int(i) for i in np.flatnonzero(c >= threshold))
    c2 = tuple(int(i) for i in np.flatnonzero(c < threshold))
    return Partition(c1, c2, threshold)


@dataclass(frozen=True)
class CondensationVerdict:
    condensed: bool
    min_cos_xi_on_c1: float
    min_cos_psi_on_c1: float
    ratio_errors: dict
    min_abs_c_on_c1: float
    divergence_floor: float
    partition: Partition


def condensation_verdict(
    traj: Trajectory,
    rel_threshold: float = 0.01,
    cos_tol: float = 1e-2,
    divergence_floor: float | None = None,
) -> CondensationVerdict:
    """Decide whether the final snapshot looks like a condensed blow-up.

    Requires, on the divergent class ``C1``: all pairwise ``cos xi >= 1 - cos_tol``,
    ``||b^i||^2 / c_i^2`` within ``cos_tol`` of 1, every ``|c_i|`` above
    ``divergence_floor`` (default: half the cube root of the energy ceiling),
    and ``||da/dt|| / ||c||^2`` within ``cos_tol`` of 1.
    """
    part = partition(traj, rel_threshold)
    s = traj.final
    diag = angles(s)
    idx = np.array(part.c1)
    if divergence_floor is None:
        ceiling = traj.energy_ceiling if math.isfinite(traj.energy_ceiling) else abs(float(traj.energies[-1]))
        divergence_floor = ceiling ** (1 / 3) / 2
    min_xi = float(diag.xi[np.ix_(idx, idx)].min())
    min_psi = float(diag.psi[idx].min())
    ratio_errors = {
        "adot_c2": abs(diag.adot_over_c2 - 1.0),
        "adot_a2": abs(diag.adot_over_a2 - 1.0),
        "max_bi_ci_dev": float(np.max(np.abs(diag.bi_over_ci[idx] - 1.0))),
    }
    min_c = float(np.min(np.abs(s.c[idx])))
    condensed = (
        min_xi >= 1.0 - cos_tol
        and ratio_errors["adot_c2"] <= cos_tol
        and ratio_errors["max_bi_ci_dev"] <= cos_tol
        and min_c >= divergence_floor
    )
    return CondensationVerdict(condensed, min_xi, min_psi, ratio_errors, min_c, divergence_floor, part)


def upper_bound_check(traj: Trajectory, from_t: float, c_constant: float, slack: float = 1e-6):
    """Check ``E(t) <= (E(s)^(-1/3) - C (t - s))^(-3)`` for snapshot pairs ``from_t <= s < t``.

    Pairs where the bracket on the right is not positive are skipped.
    """
    from .effective import BoundCheck

    if c_constant < 1:
        raise PreconditionError("the growth constant must satisfy C >= 1")
    times, energies = traj.times, traj.energies
    idx = np.flatnonzero(times >= from_t)
    if idx.size == 0 or not energies[idx[0]] > 0:
        raise PreconditionError("upper bound needs E(from_t) > 0")
    valid, worst = True, math.inf
    for pos, k in enumerate(idx[:-1]):
        later = idx[pos + 1 :]
        denom = energies[k] ** (-1 / 3) - c_constant * (times[later] - times[k])
        ok = denom > 0
        if not np.any(ok):
            continue
        bound = denom[ok] ** -3.0
        e = energies[later][ok]
        worst = min(worst, float(np.min(bound - e)))
        if np.any(e > bound * (1.0 + slack)):
            valid = False
    return BoundCheck(valid, worst)


def fsc_series(traj: Trajectory, strict_margin: float = 0.0) -> list:
    """Rows ``(t, holds, cond1_pos, cond2_pos, min_margin)`` per snapshot."""
    rows = []
    for s in traj.snapshots:
        r = check_fsc(s, strict_margin)
        rows.append((s.t, int(r.holds), r.cond1_positive_count, r.cond2_positive_count, r.min_margin))
    return rows


def angle_series(traj: Trajectory, c1) -> list:
    """Rows ``(t, min_cos_xi_c1, zeta, adot_over_c2, adot_over_a2)`` per snapshot."""
    idx = np.array(tuple(c1) if c1 else range(traj.m))
    rows = []
    for s in traj.snapshots:
        d = angles(s)
        rows.append((s.t, float(d.xi[np.ix_(idx, idx)].min()), d.zeta, d.adot_over_c2, d.adot_over_a2))
    return rows
