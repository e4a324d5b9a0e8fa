"""Three-layer tanh network ``f(x) = a^T tanh(W2 tanh(W1 x))`` trained by gradient descent.

Includes the small-initialization experiment on ``y = tanh(x)``, the
final-stage indicator counts measured on the network in effective
coordinates ``(a, W2, W1 v)``, and a consistency check between the full
gradient flow and the effective model at small initialization scale.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .effective import EffectiveState, _flat_rhs as _effective_rhs
from .errors import NumericalFailure, PreconditionError, ShapeError
from .integrator import solve_on_grid

__all__ = [
    "ThreeLayerNet",
    "Dataset",
    "InitSpec",
    "TrainOptions",
    "TrainLog",
    "TrainingDiverged",
    "tanh_dataset",
    "init_net",
    "forward",
    "predict",
    "risk",
    "gradient",
    "train",
    "target_direction",
    "cosine_similarity_map",
    "condensation_alignment",
    "fsc_count_on_net",
    "effective_energy",
    "effective_vs_full",
    "PLATEAU_EXIT",
]

PLATEAU_EXIT = "plateau_exit"


@dataclass
class ThreeLayerNet:
    a: np.ndarray
    w2: np.ndarray
    w1: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        self.w2 = np.array(self.w2, dtype=np.float64)
        self.w1 = np.array(self.w1, dtype=np.float64)
        m = self.a.size
        if self.w2.shape != (m, m) or self.w1.ndim != 2 or self.w1.shape[0] != m:
            raise ShapeError(f"inconsistent shapes a={self.a.shape}, w2={self.w2.shape}, w1={self.w1.shape}")
        if self.activation != "tanh":
            raise PreconditionError(f"unsupported activation {self.activation!r}")

    @property
    def m(self) -> int:
        return self.a.size

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def sigma_prime_at_zero(self) -> float:
        return 1.0

    def copy(self) -> "ThreeLayerNet":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a, self.w2.ravel(), self.w1.ravel()])

    def with_flat(self, theta: np.ndarray) -> "ThreeLayerNet":
        m, d = self.m, self.d
        return ThreeLayerNet(theta[:m], theta[m : m + m * m].reshape(m, m), theta[m + m * m :].reshape(m, d))

    def permuted(self, perm) -> "ThreeLayerNet":
        """Relabel hidden units of both layers with the same permutation."""
        p = np.asarray(perm)
        return ThreeLayerNet(self.a[p], self.w2[np.ix_(p, p)], self.w1[p])


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.labels, dtype=np.float64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ShapeError("need one label per input row")
        if y.size < 1:
            raise PreconditionError("dataset is empty")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


def tanh_dataset(n: int = 100, seed: int = 0, low: float = -math.pi, high: float = math.pi) -> Dataset:
    """``n`` points uniform on ``[low, high]`` labelled by ``tanh``."""
    x = np.random.default_rng(seed).uniform(low, high, size=n)
    return Dataset(x[:, None], np.tanh(x))


@dataclass(frozen=True)
class InitSpec:
    """Gaussian initialization with std ``epsilon``, or ``m ** -alpha`` when ``alpha`` is set."""

    epsilon: float | None = None
    alpha: float | None = None
    seed: int = 0

    def scale(self, m: int) -> float:
        eps = m ** (-self.alpha) if self.alpha is not None else self.epsilon
        if eps is None or not eps > 0:
            raise PreconditionError("initialization scale must be positive")
        return float(eps)


def init_net(m: int, d: int, spec: InitSpec) -> ThreeLayerNet:
    """Draw ``a``, ``W2``, ``W1`` (in that order) i.i.d. from ``N(0, eps^2)``."""
    eps = spec.scale(m)
    rng = np.random.default_rng(spec.seed)
    a = rng.normal(0.0, eps, m)
    w2 = rng.normal(0.0, eps, (m, m))
    w1 = rng.normal(0.0, eps, (m, d))
    return ThreeLayerNet(a, w2, w1)


def _check_input(net: ThreeLayerNet, x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    if x.shape[-1] != net.d:
        raise ShapeError(f"input dimension {x.shape[-1]} does not match network input {net.d}")
    return x


def forward(net: ThreeLayerNet, x) -> float:
    x = _check_input(net, np.atleast_1d(x))
    return float(net.a @ np.tanh(net.w2 @ np.tanh(net.w1 @ x)))


def predict(net: ThreeLayerNet, inputs) -> np.ndarray:
    x = _check_input(net, np.atleast_2d(inputs))
    h1 = np.tanh(net.w1 @ x.T)
    return net.a @ np.tanh(net.w2 @ h1)


def risk(net: ThreeLayerNet, data: Dataset) -> float:
    """Half mean squared error ``(1/2n) sum (f(x_i) - y_i)^2``."""
    r = predict(net, data.inputs) - data.labels
    return float(0.5 * np.mean(r * r))


@np.errstate(over="ignore", invalid="ignore")
def _loss_and_grad(a, w2, w1, xt, y):
    # overflow is caught by the caller's finiteness check on the loss
    h1 = np.tanh(w1 @ xt)
    h2 = np.tanh(w2 @ h1)
    r = a @ h2 - y
    loss = 0.5 * float(np.mean(r * r))
    g = r / y.size
    ga = h2 @ g
    delta2 = np.outer(a, g) * (1.0 - h2 * h2)
    gw2 = delta2 @ h1.T
    delta1 = (w2.T @ delta2) * (1.0 - h1 * h1)
    gw1 = delta1 @ xt.T
    return loss, ga, gw2, gw1


def gradient(net: ThreeLayerNet, data: Dataset):
    """Exact gradient ``(ga, gw2, gw1)`` of :func:`risk` by backpropagation."""
    _, ga, gw2, gw1 = _loss_and_grad(net.a, net.w2, net.w1, _check_input(net, data.inputs).T, data.labels)
    return ga, gw2, gw1


def target_direction(data: Dataset) -> np.ndarray:
    """Unit vector along ``sum_i y_i x_i``."""
    s = data.labels @ data.inputs
    norm = float(np.linalg.norm(s))
    if not norm > 0:
        raise PreconditionError("sum of y_i x_i vanishes; the target direction is undefined")
    return s / norm


def effective_energy(net: ThreeLayerNet, v: np.ndarray) -> float:
    return float(net.a @ net.w2 @ (net.w1 @ v))


def fsc_count_on_net(net: ThreeLayerNet, v: np.ndarray) -> int:
    """Strictly positive first-condition indicators in coordinates ``(a, W2, W1 v)``; at most ``2m``."""
    c = net.w1 @ v
    return int(np.sum(c * (net.a @ net.w2) > 0) + np.sum(net.a * (net.w2 @ c) > 0))


def cosine_similarity_map(w1: np.ndarray, v: np.ndarray, tol: float = 1e-12):
    """Cosines of the rows of ``w1`` against ``v`` and against each other.

    Rows with norm below ``tol`` get cosine 0 and are flagged in ``degenerate``.
    """
    w1 = np.atleast_2d(np.array(w1, dtype=np.float64))
    v = np.array(v, dtype=np.float64).reshape(-1)
    norms = np.linalg.norm(w1, axis=1)
    degenerate = norms < tol
    safe = np.where(degenerate, 1.0, norms)
    unit = w1 / safe[:, None]
    unit[degenerate] = 0.0
    vn = float(np.linalg.norm(v))
    row_v = np.clip(unit @ (v / vn), -1.0, 1.0)
    pairwise = np.clip(unit @ unit.T, -1.0, 1.0)
    return {"row_v_cos": row_v, "pairwise_cos": pairwise, "norms": norms, "degenerate": degenerate}


def condensation_alignment(w1: np.ndarray, v: np.ndarray, norm_cutoff: float = 0.01) -> float:
    """Smallest ``|cos(W1_k, v)|`` over rows whose norm is at least ``norm_cutoff`` of the largest."""
    cos = cosine_similarity_map(w1, v)
    keep = cos["norms"] >= norm_cutoff * cos["norms"].max()
    return float(np.min(np.abs(cos["row_v_cos"][keep])))


@dataclass
class TrainOptions:
    """Full-batch gradient descent controls.

    ``lr_schedule`` holds ``(iteration, lr)`` pairs; the iteration may be the
    string ``"plateau_exit"``, which fires at the first iterate whose loss is
    below ``(1 - plateau_drop)`` times the mean logged loss so far.
    Training stops early at the first loss below ``stop_loss``.
    """

    lr: float = 5e-3
    iters: int = 10_000
    log_every: int = 100
    lr_schedule: list = field(default_factory=list)
    checkpoint_every: int = 0
    stop_loss: float | None = None
    plateau_drop: float = 0.5


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    fsc_counts: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    checkpoint_every: int = 0
    checkpoints: dict = field(default_factory=dict)
    plateau_exit_iter: int | None = None
    lr_changes: list = field(default_factory=list)
    final_iter: int = 0
    final_loss: float = math.nan
    net: ThreeLayerNet | None = None

    @property
    def max_fsc_count(self) -> int:
        return max(self.fsc_counts) if self.fsc_counts else 0

    def rows(self) -> list:
        return list(zip(self.iterations, self.losses, self.fsc_counts, self.energies))


class TrainingDiverged(NumericalFailure):
    def __init__(self, message, log: TrainLog, last_checkpoint):
        super().__init__(message)
        self.log = log
        self.last_checkpoint = last_checkpoint


def train(
    net: ThreeLayerNet,
    data: Dataset,
    opts: TrainOptions | None = None,
    v: np.ndarray | None = None,
    start_iter: int = 0,
) -> TrainLog:
    """Plain full-batch gradient descent on :func:`risk`.

    Logs loss, first-condition count and effective energy every ``log_every``
    iterations plus the final iterate. ``start_iter`` resumes the iteration
    counter when restarting from a checkpoint.
    """
    opts = TrainOptions() if opts is None else opts
    schedule = sorted(
        ((it, float(lr)) for it, lr in opts.lr_schedule if it != PLATEAU_EXIT), key=lambda p: p[0]
    )
    plateau_lr = next((float(lr) for it, lr in opts.lr_schedule if it == PLATEAU_EXIT), None)
    lrs = [lr for _, lr in schedule] + ([plateau_lr] if plateau_lr is not None else []) + [opts.lr]
    if any(not lr > 0 for lr in lrs) or opts.log_every < 1 or opts.iters < 0:
        raise PreconditionError("learning rates must be positive and log_every >= 1")
    v = target_direction(data) if v is None else np.asarray(v, dtype=np.float64)

    a, w2, w1 = net.a.copy(), net.w2.copy(), net.w1.copy()
    xt, y = _check_input(net, data.inputs).T, data.labels
    lr = opts.lr
    for it, new_lr in schedule:
        if it <= start_iter:
            lr = new_lr
    pending = [(it, new_lr) for it, new_lr in schedule if it > start_iter]
    log = TrainLog(checkpoint_every=opts.checkpoint_every)
    last_good = (start_iter, ThreeLayerNet(a.copy(), w2.copy(), w1.copy()))
    plateau_sum, plateau_n = 0.0, 0
    plateau_done = plateau_lr is None
    end = start_iter + opts.iters

    for it in range(start_iter, end + 1):
        loss, ga, gw2, gw1 = _loss_and_grad(a, w2, w1, xt, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}", log, last_good)
        stop = opts.stop_loss is not None and loss < opts.stop_loss
        if (it - start_iter) % opts.log_every == 0 or it == end or stop:
            cur = ThreeLayerNet(a, w2, w1)
            log.iterations.append(it)
            log.losses.append(loss)
            log.fsc_counts.append(fsc_count_on_net(cur, v))
            log.energies.append(effective_energy(cur, v))
            if not plateau_done:
                plateau_sum += loss
                plateau_n += 1
        if opts.checkpoint_every and (it - start_iter) % opts.checkpoint_every == 0:
            last_good = (it, ThreeLayerNet(a.copy(), w2.copy(), w1.copy()))
            log.checkpoints[it] = last_good[1]
        if stop or it == end:
            break
        while pending and pending[0][0] <= it:
            lr = pending.pop(0)[1]
            log.lr_changes.append((it, lr))
        if not plateau_done and plateau_n and loss < (1.0 - opts.plateau_drop) * plateau_sum / plateau_n:
            plateau_done = True
            log.plateau_exit_iter = it
            lr = plateau_lr
            log.lr_changes.append((it, lr))
        a -= lr * ga
        w2 -= lr * gw2
        w1 -= lr * gw1

    log.final_iter = it
    log.final_loss = loss
    log.net = ThreeLayerNet(a, w2, w1)
    return log


def effective_vs_full(
    net0: ThreeLayerNet,
    data: Dataset,
    horizon: float,
    epsilon: float,
    n_times: int = 65,
    rel_tol: float = 1e-10,
    abs_tol: float = 1e-12,
) -> dict:
    """Compare the full gradient flow with the effective model on the rescaled clock.

    Both systems start from the normalized parameters ``theta / epsilon``.
    The full flow is integrated in rescaled time, where it reads
    ``d theta_bar / dt_bar = -grad R(eps theta_bar) / (eps^2 kappa)`` with
    ``kappa = sigma'(0)^2 ||sum y_i x_i|| / n``. Observables are
    ``(a_bar, W2_bar, W1_bar v)``; the error at each output time is the
    Euclidean distance relative to the norm of the effective state.
    """
    if not 0 < epsilon <= 1e-2:
        raise PreconditionError("effective_vs_full needs a small initialization scale (0 < eps <= 1e-2)")
    if not horizon > 0:
        raise PreconditionError("horizon must be positive")
    v = target_direction(data)
    m, d = net0.m, net0.d
    kappa = net0.sigma_prime_at_zero**2 * float(np.linalg.norm(data.labels @ data.inputs)) / data.n
    xt, y = data.inputs.T, data.labels
    theta_bar0 = net0.flat() / epsilon
    n_a, n_w2 = m, m * m

    def full_rhs(theta_bar):
        theta = epsilon * theta_bar
        a = theta[:n_a]
        w2 = theta[n_a : n_a + n_w2].reshape(m, m)
        w1 = theta[n_a + n_w2 :].reshape(m, d)
        _, ga, gw2, gw1 = _loss_and_grad(a, w2, w1, xt, y)
        return -np.concatenate([ga, gw2.ravel(), gw1.ravel()]) / (epsilon**2 * kappa)

    times = np.linspace(0.0, horizon, n_times)
    full = solve_on_grid(full_rhs, theta_bar0, times, rel_tol=rel_tol, abs_tol=abs_tol)
    bar = net0.with_flat(theta_bar0)
    s0 = EffectiveState(bar.a, bar.w2, bar.w1 @ v)
    eff = solve_on_grid(_effective_rhs(m), s0.flat(), times, rel_tol=rel_tol, abs_tol=abs_tol)

    errors = np.empty(n_times)
    for k in range(n_times):
        fk = net0.with_flat(full[k])
        obs = np.concatenate([fk.a, fk.w2.ravel(), fk.w1 @ v])
        errors[k] = np.linalg.norm(obs - eff[k]) / np.linalg.norm(eff[k])
    return {"max_rel_err": float(errors.max()), "times": times, "errors": errors, "kappa": kappa}
