import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condlab import effective as eff
from condlab.effective import EffectiveState, StopReason
from condlab.errors import PreconditionError, ShapeError

# Frozen output of a seeded rejection search over rounded Gaussian 2x2 states.
ASSUMPTION_WITNESS = EffectiveState([-0.39, -1.39], [[-2.1, 0.63], [-1.17, 0.78]], [1.85, -0.11])


def zero_state(m=2):
    return EffectiveState(np.zeros(m), np.zeros((m, m)), np.zeros(m))


@pytest.fixture(scope="module")
def scalar_run():
    return eff.integrate(eff.scalar_state(), energy_ceiling=1e9)


@pytest.fixture(scope="module")
def balanced_run():
    return eff.integrate(eff.balanced_example(), t_end=50.0)


def test_state_validation():
    with pytest.raises(ShapeError):
        EffectiveState([1, 2], np.eye(3), [1, 2])
    with pytest.raises(ShapeError):
        EffectiveState([1, 2], np.eye(2), [1])


def test_energy_examples():
    assert eff.energy(eff.balanced_example()) == -1
    assert eff.energy(zero_state()) == 0
    assert eff.energy(eff.scalar_state()) == 1


def test_derivative_examples():
    da, db, dc = eff.derivative(eff.balanced_example())
    np.testing.assert_array_equal(da, [-1, 0])
    np.testing.assert_array_equal(db, [[-1, 0], [0, 0]])
    np.testing.assert_array_equal(dc, [1, 0])
    for part in eff.derivative(zero_state(3)):
        assert not np.any(part)
    for part in eff.derivative(eff.scalar_state()):
        np.testing.assert_array_equal(part, np.ones_like(part))


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_derivative_permutation_equivariance(seed, m):
    rng = np.random.default_rng(seed)
    s = eff.random_state(m, rng)
    p, q = np.eye(m)[rng.permutation(m)], np.eye(m)[rng.permutation(m)]
    da, db, dc = eff.derivative(s)
    pda, pdb, pdc = eff.derivative(EffectiveState(p @ s.a, p @ s.b @ q.T, q @ s.c))
    np.testing.assert_allclose(pda, p @ da, atol=1e-12)
    np.testing.assert_allclose(pdb, p @ db @ q.T, atol=1e-12)
    np.testing.assert_allclose(pdc, q @ dc, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_energy_is_cubic_and_flow_quadratic(seed, scale):
    s = eff.random_state(3, np.random.default_rng(seed))
    assert math.isclose(eff.energy(s.scaled(scale)), scale**3 * eff.energy(s), rel_tol=1e-12, abs_tol=1e-12)
    for d1, d2 in zip(eff.derivative(s), eff.derivative(s.scaled(scale))):
        np.testing.assert_allclose(d2, scale**2 * d1, rtol=1e-12, atol=1e-12)


def test_scalar_stops_near_closed_form_time():
    traj = eff.integrate(eff.scalar_state(), energy_ceiling=1e3)
    assert traj.stop_reason is StopReason.ENERGY_CEILING
    assert traj.energies[-1] >= 1e3
    assert abs(traj.final.t - 0.9) <= 1e-4


def test_scalar_matches_closed_form(scalar_run):
    for t, e in zip(scalar_run.times, scalar_run.energies):
        if e <= 1e6:
            assert abs(e * (1 - t) ** 3 - 1) <= 1e-6


def test_zero_state_is_fixed_point():
    traj = eff.integrate(zero_state(), t_end=1.0)
    assert traj.stop_reason is StopReason.REACHED_T_END
    assert traj.final.t == 1.0
    assert all(not np.any(s.flat()) for s in traj.snapshots)


def test_balanced_example_decays(balanced_run):
    e, t = balanced_run.energies, balanced_run.times
    assert balanced_run.stop_reason is StopReason.REACHED_T_END
    assert np.all(np.diff(e) >= 0)
    assert np.all(e <= 0)
    # the orbit is the equality case of the bound; allow integration error only
    assert np.all(np.abs(e) * (t + 1) ** 3 <= 1 + 1e-8)
    assert abs(e[-1] + 51.0**-3) <= 1e-9


def test_trajectory_bookkeeping(scalar_run):
    assert np.all(np.diff(scalar_run.times) > 0)
    for s, e in zip(scalar_run.snapshots, scalar_run.energies):
        assert math.isclose(eff.energy(s), e, rel_tol=1e-12)
    assert len(scalar_run.step_sizes) == len(scalar_run)


def test_sample_stride_is_honoured():
    # accepted steps are decimated, not interpolated onto a grid
    traj = eff.integrate(eff.balanced_example(), t_end=2.0, sample_stride=0.25)
    gaps = np.diff(traj.times)
    assert np.all(gaps[:-1] >= 0.25 - 1e-12)
    assert traj.times[-1] == 2.0
    assert len(traj) <= 2.0 / 0.25 + 2


def test_min_step_stop_is_reported():
    traj = eff.integrate(eff.scalar_state(), energy_ceiling=1e200, min_step=1e-6)
    assert traj.stop_reason is StopReason.MIN_STEP
    assert traj.final.t < 1.0


@pytest.mark.parametrize(
    "bad",
    [{"rel_tol": 0}, {"abs_tol": -1}, {"min_step": 0}, {"energy_ceiling": 0}, {"t_end": 0}, {"sample_stride": -1}],
)
def test_invalid_options(bad):
    with pytest.raises(PreconditionError):
        eff.integrate(eff.scalar_state(), **bad)


def test_non_finite_start_rejected():
    with pytest.raises(PreconditionError):
        eff.integrate(EffectiveState([math.nan], [[1.0]], [1.0]))


def test_conservation_trivial_cases(scalar_run):
    single = eff.Trajectory((eff.scalar_state(),), np.array([1.0]), np.array([0.0]), StopReason.REACHED_T_END)
    assert eff.conservation_check(single).max_drift == 0
    assert eff.conservation_check(eff.integrate(zero_state(), t_end=1.0)).max_drift == 0
    scalar = eff.integrate(eff.scalar_state(), energy_ceiling=1e3)
    assert eff.conservation_check(scalar).global_drift <= 1e-8


@pytest.mark.parametrize("m", [2, 5])
@pytest.mark.parametrize("seed", range(5))
def test_conservation_random(m, seed):
    traj = eff.integrate(eff.random_state(m, np.random.default_rng(seed)))
    rep = eff.conservation_check(traj)
    scale = 1 + np.sum(traj.final.b**2)
    assert rep.max_drift <= 1e-8 * scale
    assert np.all(rep.per_row_drift >= 0) and np.all(rep.per_col_drift >= 0)


def test_monotone_energy_and_growth_rate():
    for seed in range(5):
        traj = eff.integrate(eff.random_state(4, np.random.default_rng(seed)))
        e, t = traj.energies, traj.times
        assert np.all(np.diff(e) >= -1e-9 * np.maximum(1, np.abs(e[1:])))
        rates = eff.growth_rates(t, e)
        assert np.all(rates[np.isfinite(rates)] >= 1 - 1e-3)


def test_assumption_examples():
    r = eff.check_blowup_assumption(eff.balanced_example())
    assert not r.holds and r.norm_gap == 0
    r = eff.check_blowup_assumption(EffectiveState([2, 0], np.eye(2), [1, 0]))
    assert r.norm_gap == 1 and r.discriminant == 0 and not r.holds
    r = eff.check_blowup_assumption(EffectiveState([3, 0], np.eye(2), [1, 0]))
    assert r.norm_gap == 2 and r.discriminant == 0 and not r.holds
    r = eff.check_blowup_assumption(EffectiveState([2, 1], np.eye(2), [1, 0]))
    assert r.discriminant == 0 and not r.holds


def test_assumption_witness():
    r = eff.check_blowup_assumption(ASSUMPTION_WITNESS)
    assert r.holds
    assert r.norm_gap == pytest.approx(math.hypot(0.39, 1.39) - math.hypot(1.85, 0.11))
    assert r.discriminant == pytest.approx(10.1377088, abs=1e-9)
    traj = eff.integrate(ASSUMPTION_WITNESS)
    assert traj.stop_reason is StopReason.ENERGY_CEILING


def test_norms_diverge_at_ceiling_for_assumption_states():
    hits = 0
    for seed in range(40):
        s = eff.random_state(3, np.random.default_rng(seed))
        if not eff.check_blowup_assumption(s).holds:
            continue
        traj = eff.integrate(s)
        if traj.stop_reason is not StopReason.ENERGY_CEILING:
            continue
        hits += 1
        f = traj.final
        floor = traj.energy_ceiling ** (1 / 3) / 2
        assert min(np.linalg.norm(f.a), np.linalg.norm(f.b), np.linalg.norm(f.c)) >= floor
    assert hits >= 10


def test_lower_bound(scalar_run):
    lb = eff.lower_bound_check(scalar_run)
    assert lb.valid and lb.worst_margin > -1e-6 * 1e9
    with pytest.raises(PreconditionError):
        eff.lower_bound_check(eff.integrate(eff.balanced_example(), t_end=1.0))


def test_lower_bound_random_positive_starts():
    done = 0
    for seed in range(60):
        s = eff.random_state(5, np.random.default_rng(seed))
        if eff.energy(s) <= 0 or not eff.check_blowup_assumption(s).holds:
            continue
        assert eff.lower_bound_check(eff.integrate(s)).valid
        done += 1
    assert done >= 10


def test_bracket_scalar(scalar_run):
    b = eff.blowup_bracket(scalar_run)
    assert abs(b.upper_time - 1.0) <= 1e-6
    assert abs(b.c_estimate - 1.0) <= 0.05
    assert b.lower_time <= b.upper_time
    assert b.consistent()
    assert b.e0 == 1.0 and b.fit_from_t is not None


def test_bracket_balanced(balanced_run):
    b = eff.blowup_bracket(balanced_run)
    assert b.upper_time is None and b.lower_time is None and b.consistent()


def test_bracket_with_larger_constant_is_earlier(scalar_run):
    loose = eff.blowup_bracket(scalar_run, c_constant=10.0)
    tight = eff.blowup_bracket(scalar_run)
    assert loose.lower_time < tight.lower_time <= tight.upper_time


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_bracket_consistency_property(seed):
    s = eff.random_state(3, np.random.default_rng(seed))
    traj = eff.integrate(s)
    if traj.stop_reason is StopReason.ENERGY_CEILING:
        assert eff.blowup_bracket(traj).consistent()
