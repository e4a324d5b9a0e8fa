"""Deep (depth-3) linear matrix factorization for symmetric matrix sensing.

Covers the sensing risk and its exact gradients, the diagonalized effective
dynamics

    da_i/dt = lam_i b c_i,   db/dt = sum_i lam_i a_i c_i^T,   dc_i/dt = lam_i b^T a_i,

its energy ``sum_i lam_i a_i^T b c_i``, and the matching final stage condition.
Here ``a_i`` is row ``i`` of the transformed outer factor, ``b`` the middle
factor and ``c_i`` column ``i`` of the transformed inner factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .effective import IntegrateOptions, StopReason, run_monitored
from .errors import NumericalFailure, PreconditionError, ShapeError
from .linalg import as_matrix, singular_values, symmetric_eigen

__all__ = [
    "SensingProblem",
    "DeepLinearNet",
    "MatrixEffectiveState",
    "MatrixTrajectory",
    "McFscReport",
    "TrainOptions",
    "DeepLinearLog",
    "coordinate_problem",
    "entry_problem",
    "gaussian_problem",
    "low_rank_target",
    "random_net",
    "build_v",
    "diagonalize_and_transform",
    "to_network",
    "mc_derivative",
    "mc_energy",
    "mc_integrate",
    "check_mc_fsc",
    "mc_fsc_persistence",
    "sensing_risk",
    "sensing_gradient",
    "train_deep_linear",
]

SYMMETRY_TOL = 1e-12
NEGLECT_TOL = 1e-12


def _all_symmetric(x: np.ndarray) -> bool:
    return not x.shape[0] or float(np.max(np.abs(x - x.transpose(0, 2, 1)))) <= SYMMETRY_TOL


@dataclass(frozen=True)
class SensingProblem:
    """Linear measurements ``y_i = <X_i, W*>``.

    Measurement matrices must be symmetric unless ``allow_asymmetric`` is set;
    the effective dynamics only ever see the symmetrized ``V``.
    """

    measurements: np.ndarray  # (n, m, m)
    labels: np.ndarray  # (n,)
    target: np.ndarray | None = None
    allow_asymmetric: bool = False

    def __post_init__(self):
        x = np.array(self.measurements, dtype=np.float64)
        y = np.array(self.labels, dtype=np.float64).reshape(-1)
        if x.ndim != 3 or x.shape[1] != x.shape[2]:
            raise ShapeError(f"measurements must have shape (n, m, m), got {x.shape}")
        if x.shape[0] != y.size:
            raise ShapeError("one label per measurement is required")
        if not self.allow_asymmetric and not _all_symmetric(x):
            raise PreconditionError("measurement matrices must be symmetric")
        object.__setattr__(self, "measurements", x)
        object.__setattr__(self, "labels", y)
        if self.target is not None:
            object.__setattr__(self, "target", as_matrix(self.target))

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def m(self) -> int:
        return self.measurements.shape[1]

    @property
    def is_symmetric(self) -> bool:
        return _all_symmetric(self.measurements)

    def commutator_defect(self) -> float:
        """Largest ``||X_i X_j - X_j X_i||_F``; zero for commuting families."""
        x = self.measurements
        worst = 0.0
        for i in range(self.n):
            prod = np.einsum("ab,jbc->jac", x[i], x[i + 1 :])
            comm = prod - prod.transpose(0, 2, 1)  # X_i X_j - (X_i X_j)^T = X_i X_j - X_j X_i
            if comm.size:
                worst = max(worst, float(np.max(np.sqrt(np.sum(comm**2, axis=(1, 2))))))
        return worst


def low_rank_target(m: int, diagonal=(1.0, -1.0)) -> np.ndarray:
    """``diag(d_1, ..., d_k, 0, ..., 0)`` of size ``m``."""
    if len(diagonal) > m:
        raise ShapeError("more diagonal entries than the matrix size")
    out = np.zeros((m, m))
    out[np.arange(len(diagonal)), np.arange(len(diagonal))] = diagonal
    return out


def coordinate_problem(target) -> SensingProblem:
    """Measure each diagonal entry with the projector ``e_i e_i^T``."""
    target = as_matrix(target)
    m = target.shape[0]
    x = np.zeros((m, m, m))
    x[np.arange(m), np.arange(m), np.arange(m)] = 1.0
    return SensingProblem(x, np.diag(target).copy(), target)


def entry_problem(target) -> SensingProblem:
    """Observe every entry ``W*_{ij}`` through ``e_i e_j^T`` (``m^2`` asymmetric measurements).

    Symmetric families cannot see the antisymmetric part of the product, so
    on their own they leave the implicit low-rank bias of depth unchallenged
    in a way that forces a rank-one fit; this family pins down ``W*`` fully.
    """
    target = as_matrix(target)
    m = target.shape[0]
    x = np.zeros((m * m, m, m))
    rows, cols = np.divmod(np.arange(m * m), m)
    x[np.arange(m * m), rows, cols] = 1.0
    return SensingProblem(x, target[rows, cols].copy(), target, allow_asymmetric=True)


def gaussian_problem(target, n: int, rng: np.random.Generator) -> SensingProblem:
    """Symmetrized Gaussian measurements; these generally do not commute."""
    target = as_matrix(target)
    m = target.shape[0]
    g = rng.normal(size=(n, m, m))
    x = 0.5 * (g + g.transpose(0, 2, 1))
    return SensingProblem(x, np.einsum("nij,ij->n", x, target), target)


@dataclass(frozen=True)
class DeepLinearNet:
    w3: np.ndarray
    w2: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        mats = [as_matrix(w) for w in (self.w3, self.w2, self.w1)]
        shape = mats[0].shape
        if shape[0] != shape[1] or any(w.shape != shape for w in mats):
            raise ShapeError("all three factors must be square with equal sizes")
        for name, w in zip(("w3", "w2", "w1"), mats):
            object.__setattr__(self, name, w)

    @property
    def m(self) -> int:
        return self.w1.shape[0]

    def product(self) -> np.ndarray:
        return self.w3 @ self.w2 @ self.w1

    def conjugated(self, q: np.ndarray) -> "DeepLinearNet":
        return DeepLinearNet(q @ self.w3 @ q.T, q @ self.w2 @ q.T, q @ self.w1 @ q.T)


def random_net(m: int, std: float, rng: np.random.Generator) -> DeepLinearNet:
    """Gaussian factors drawn in the order w3, w2, w1."""
    return DeepLinearNet(rng.normal(0, std, (m, m)), rng.normal(0, std, (m, m)), rng.normal(0, std, (m, m)))


def build_v(problem: SensingProblem) -> np.ndarray:
    """``V = (1/n) sum_i y_i X_i``."""
    if problem.n == 0:
        raise PreconditionError("the sensing problem has no measurements")
    v = np.einsum("n,nij->ij", problem.labels, problem.measurements) / problem.n
    return 0.5 * (v + v.T)


@dataclass(frozen=True)
class MatrixEffectiveState:
    """Diagonalized effective state; ``a`` holds the rows ``a_i`` and ``c`` the columns ``c_i``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: np.ndarray
    neglected: np.ndarray = None
    t: float = 0.0

    def __post_init__(self):
        a, b, c = (np.array(x, dtype=np.float64) for x in (self.a, self.b, self.c))
        lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        m = lam.size
        if any(x.shape != (m, m) for x in (a, b, c)):
            raise ShapeError("a, b, c must be m x m with m = len(lam)")
        neglected = self.neglected
        if neglected is None:
            scale = float(np.max(np.abs(lam))) if m else 0.0
            neglected = np.abs(lam) <= NEGLECT_TOL * scale if scale > 0 else np.ones(m, dtype=bool)
        neglected = np.array(neglected, dtype=bool).reshape(-1)
        for name, val in zip(("a", "b", "c", "lam", "neglected"), (a, b, c, lam, neglected)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "t", float(self.t))

    @property
    def m(self) -> int:
        return self.lam.size

    @property
    def a_rows(self) -> list:
        return [self.a[i].copy() for i in range(self.m)]

    @property
    def c_cols(self) -> list:
        return [self.c[:, i].copy() for i in range(self.m)]

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(~self.neglected)

    @property
    def effective_lam(self) -> np.ndarray:
        return np.where(self.neglected, 0.0, self.lam)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b.ravel(), self.c.ravel()])

    def with_flat(self, y: np.ndarray, t: float) -> "MatrixEffectiveState":
        m2 = self.m * self.m
        shape = (self.m, self.m)
        return MatrixEffectiveState(
            y[:m2].reshape(shape).copy(),
            y[m2 : 2 * m2].reshape(shape).copy(),
            y[2 * m2 :].reshape(shape).copy(),
            self.lam,
            self.neglected,
            t,
        )


def diagonalize_and_transform(v, net: DeepLinearNet, tol: float = NEGLECT_TOL):
    """Eigendecompose ``V = O diag(lam) O^T`` and map each factor to ``O^T W O``.

    Returns ``(state, O)``. Indices with ``|lam_i| <= tol * max|lam|`` are kept
    in the state but flagged as neglected and drop out of the dynamics.
    """
    v = as_matrix(v)
    if v.shape != (net.m, net.m):
        raise ShapeError("V and the factors must share their size")
    lam, o = symmetric_eigen(v, tol=SYMMETRY_TOL)
    scale = float(np.max(np.abs(lam)))
    neglected = np.abs(lam) <= tol * scale if scale > 0 else np.ones(lam.size, dtype=bool)
    state = MatrixEffectiveState(o.T @ net.w3 @ o, o.T @ net.w2 @ o, o.T @ net.w1 @ o, lam, neglected)
    return state, o


def to_network(state: MatrixEffectiveState, o: np.ndarray) -> DeepLinearNet:
    """Inverse of :func:`diagonalize_and_transform` for the factors."""
    return DeepLinearNet(o @ state.a @ o.T, o @ state.b @ o.T, o @ state.c @ o.T)


def _rhs_parts(a, b, c, lam):
    da = lam[:, None] * (b @ c).T
    db = (a.T * lam[None, :]) @ c.T
    dc = (b.T @ a.T) * lam[None, :]
    return da, db, dc


def mc_derivative(s: MatrixEffectiveState):
    """Return ``(da, db, dc)`` laid out like ``(s.a, s.b, s.c)``."""
    return _rhs_parts(s.a, s.b, s.c, s.effective_lam)


def mc_energy(s: MatrixEffectiveState) -> float:
    lam = s.effective_lam
    return float(np.sum(lam * np.einsum("ij,jk,ki->i", s.a, s.b, s.c)))


def _flat_rhs(m: int, lam: np.ndarray):
    m2 = m * m

    def rhs(y):
        a = y[:m2].reshape(m, m)
        b = y[m2 : 2 * m2].reshape(m, m)
        c = y[2 * m2 :].reshape(m, m)
        da, db, dc = _rhs_parts(a, b, c, lam)
        return np.concatenate([da.ravel(), db.ravel(), dc.ravel()])

    return rhs


def _flat_energy(m: int, lam: np.ndarray):
    m2 = m * m

    def fn(y):
        a = y[:m2].reshape(m, m)
        b = y[m2 : 2 * m2].reshape(m, m)
        c = y[2 * m2 :].reshape(m, m)
        return float(np.sum(lam * np.einsum("ij,jk,ki->i", a, b, c)))

    return fn


@dataclass(frozen=True)
class MatrixTrajectory:
    snapshots: tuple
    energies: np.ndarray
    step_sizes: np.ndarray
    stop_reason: StopReason
    sample_stride: float = math.nan
    energy_ceiling: float = math.nan

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def final(self) -> MatrixEffectiveState:
        return self.snapshots[-1]

    def __len__(self) -> int:
        return len(self.snapshots)


def mc_integrate(s0: MatrixEffectiveState, opts: IntegrateOptions | None = None, **overrides) -> MatrixTrajectory:
    """Same contract as :func:`condlab.effective.integrate`, monitoring :func:`mc_energy`."""
    if opts is None:
        opts = IntegrateOptions(**overrides)
    elif overrides:
        opts = replace(opts, **overrides)
    m, lam = s0.m, s0.effective_lam
    e0 = mc_energy(s0)
    if e0 > 0:
        hint = e0 ** (-1 / 3)
    else:
        scale = float(np.max(np.abs(lam))) * np.linalg.norm(s0.a) * np.linalg.norm(s0.b) * np.linalg.norm(s0.c)
        hint = scale ** (-1 / 3) if scale > 0 else 1.0
    raw = run_monitored(_flat_rhs(m, lam), _flat_energy(m, lam), s0.flat(), s0.t, opts, hint)
    snaps = tuple(s0.with_flat(y, t) for t, y in zip(raw.times, raw.states))
    return MatrixTrajectory(
        snaps, np.array(raw.energies), np.array(raw.steps), raw.stop_reason, raw.stride, opts.energy_ceiling
    )


@dataclass(frozen=True)
class McFscReport:
    holds: bool
    cond_counts: tuple
    min_margin: float
    t: float = 0.0


def mc_fsc_indicators(s: MatrixEffectiveState):
    """Indicator arrays for the three condition families over retained indices."""
    r = s.retained
    lam = s.lam[r]
    a, b, c = s.a, s.b, s.c
    ab = (a @ b)[r]  # [i, j] = a_i^T b^j
    bc = (b @ c)[:, r].T  # [i, j] = b_j c_i
    ci = c[:, r].T  # [i, j] = c_{i,j}
    ai = a[r]  # [i, j] = a_{i,j}
    cond1 = np.concatenate([(lam[:, None] * ci * ab).ravel(), (lam[:, None] * ai * bc).ravel()])
    btb, bbt = b.T @ b, b @ b.T
    cond2 = np.concatenate(
        [
            (ci[:, :, None] * ci[:, None, :] * btb[None]).ravel(),
            (ai[:, :, None] * ai[:, None, :] * bbt[None]).ravel(),
        ]
    )
    # [i, j, k, l] = lam_i lam_j a_{i,k} a_{j,k} c_{i,l} c_{j,l}
    aa = ai[:, None, :] * ai[None, :, :]
    cc = ci[:, None, :] * ci[None, :, :]
    cond3 = (np.outer(lam, lam)[:, :, None, None] * aa[:, :, :, None] * cc[:, :, None, :]).ravel()
    return cond1, cond2, cond3


def check_mc_fsc(s: MatrixEffectiveState, strict_margin: float = 0.0) -> McFscReport:
    n, m = s.retained.size, s.m
    if n == 0:
        return McFscReport(False, (0, 0, 0), 0.0, s.t)
    conds = mc_fsc_indicators(s)
    counts = tuple(int(np.sum(x > strict_margin)) for x in conds)
    full = (2 * n * m, 2 * n * m * m, n * n * m * m)
    return McFscReport(counts == full, counts, float(min(x.min() for x in conds)), s.t)


def mc_fsc_persistence(traj: MatrixTrajectory, strict_margin: float = 0.0):
    from .stages import Persistence

    first, violated = None, False
    for s in traj.snapshots:
        holds = check_mc_fsc(s, strict_margin).holds
        if first is None:
            if holds:
                first = s.t
        elif not holds:
            violated = True
    return Persistence(first, violated)


def _residuals(net: DeepLinearNet, problem: SensingProblem, w: np.ndarray | None = None) -> np.ndarray:
    w = net.product() if w is None else w
    return np.einsum("nij,ij->n", problem.measurements, w) - problem.labels


def sensing_risk(net: DeepLinearNet, problem: SensingProblem) -> float:
    """``(1/2n) sum_i (<W, X_i> - y_i)^2`` with ``W = W3 W2 W1``."""
    if problem.n == 0:
        raise PreconditionError("the sensing problem has no measurements")
    r = _residuals(net, problem)
    return float(0.5 * np.mean(r * r))


def sensing_gradient(net: DeepLinearNet, problem: SensingProblem):
    """Exact gradients ``(g3, g2, g1)`` of :func:`sensing_risk`."""
    r = _residuals(net, problem)
    g = np.einsum("n,nij->ij", r, problem.measurements) / problem.n
    w21 = net.w2 @ net.w1
    w32 = net.w3 @ net.w2
    return g @ w21.T, net.w3.T @ g @ net.w1.T, w32.T @ g


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 0.5
    iters: int = 100_000
    log_every: int = 100
    top_k: int = 4
    stop_loss: float | None = 1e-3


@dataclass
class DeepLinearLog:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    singular_values: list = field(default_factory=list)
    first_below_iter: int | None = None
    first_below_loss: float | None = None
    first_below_svs: np.ndarray | None = None
    net: DeepLinearNet | None = None

    def rows(self, top_k: int = 4) -> list:
        out = []
        for it, loss, sv in zip(self.iterations, self.losses, self.singular_values):
            padded = list(sv[:top_k]) + [0.0] * max(0, top_k - len(sv))
            out.append((it, loss, *padded))
        return out


def train_deep_linear(net: DeepLinearNet, problem: SensingProblem, opts: TrainOptions | None = None) -> DeepLinearLog:
    """Full-batch gradient descent on the sensing risk.

    Logs loss and the leading singular values of ``W3 W2 W1`` every
    ``log_every`` steps and at the first iterate with loss below
    ``stop_loss``, where training stops. Raises :class:`NumericalFailure`
    when the loss stops being finite.
    """
    opts = TrainOptions() if opts is None else opts
    if not opts.lr > 0:
        raise PreconditionError("learning rate must be positive")
    if problem.m != net.m:
        raise ShapeError("problem and network sizes differ")
    w3, w2, w1 = net.w3.copy(), net.w2.copy(), net.w1.copy()
    log = DeepLinearLog()
    with np.errstate(over="ignore", invalid="ignore"):
        return _gd_loop(w3, w2, w1, problem, opts, log)


def _gd_loop(w3, w2, w1, problem, opts, log):
    xs, ys, n = problem.measurements, problem.labels, problem.n
    for it in range(opts.iters + 1):
        w = w3 @ w2 @ w1
        r = np.einsum("nij,ij->n", xs, w) - ys
        loss = float(0.5 * np.mean(r * r))
        if not math.isfinite(loss):
            raise NumericalFailure(f"loss diverged at iteration {it}")
        below = opts.stop_loss is not None and loss < opts.stop_loss
        if it % opts.log_every == 0 or below or it == opts.iters:
            svs = singular_values(w)
            log.iterations.append(it)
            log.losses.append(loss)
            log.singular_values.append(svs[: opts.top_k])
            if below:
                log.first_below_iter, log.first_below_loss, log.first_below_svs = it, loss, svs
                break
        if it == opts.iters:
            break
        g = np.einsum("n,nij->ij", r, xs) / n
        g3, g2, g1 = g @ (w2 @ w1).T, w3.T @ g @ w1.T, (w3 @ w2).T @ g
        w3, w2, w1 = w3 - opts.lr * g3, w2 - opts.lr * g2, w1 - opts.lr * g1
    log.net = DeepLinearNet(w3, w2, w1)
    return log
