import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from condlab import effective as eff
from condlab import stages
from condlab.effective import EffectiveState, StopReason
from condlab.errors import PreconditionError


def zero_state(m=2):
    return EffectiveState(np.zeros(m), np.zeros((m, m)), np.zeros(m))


@pytest.fixture(scope="module")
def scalar_run():
    return eff.integrate(eff.scalar_state(), energy_ceiling=1e9)


@pytest.fixture(scope="module")
def small_init_runs():
    runs = []
    for seed in range(4):
        traj = eff.integrate(eff.random_state(10, np.random.default_rng(seed), std=1e-2))
        runs.append(traj)
    return runs


def test_fsc_examples():
    r = stages.check_fsc(eff.scalar_state())
    assert r.holds and r.cond1_positive_count == 2 and r.cond2_positive_count == 2
    r = stages.check_fsc(eff.balanced_example())
    assert not r.holds
    cond1, _ = stages.fsc_indicators(eff.balanced_example())
    assert cond1[0] == -1.0  # c_1 a^T b^1
    r = stages.check_fsc(zero_state())
    assert not r.holds and r.min_margin == 0


def test_fsc_strict_margin():
    s = eff.scalar_state(0.5)  # every indicator equals 1/16
    assert stages.check_fsc(s, strict_margin=0.06).holds
    assert not stages.check_fsc(s, strict_margin=0.07).holds


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_fsc_report_invariant(seed, m):
    r = stages.check_fsc(eff.random_state(m, np.random.default_rng(seed)))
    assert r.holds == (r.cond1_positive_count == 2 * m and r.cond2_positive_count == 2 * m * m)


def test_persistence_examples(scalar_run):
    p = stages.fsc_persistence(scalar_run)
    assert p.first_hold_t == 0.0 and not p.violated_after
    p = stages.fsc_persistence(eff.integrate(eff.balanced_example(), t_end=50.0))
    assert p.first_hold_t is None and not p.violated_after


def test_persistence_random_m5():
    found = 0
    for seed in range(40):
        traj = eff.integrate(eff.random_state(5, np.random.default_rng(seed)))
        p = stages.fsc_persistence(traj)
        if p.first_hold_t is not None:
            found += 1
            assert not p.violated_after
    assert found >= 5


def test_indicators_grow_after_fsc(small_init_runs):
    for traj in small_init_runs:
        first = stages.fsc_persistence(traj).first_hold_t
        assert first is not None
        held = [s for s in traj.snapshots if s.t >= first]
        prev = None
        for s in held:
            vals = np.concatenate(stages.fsc_indicators(s))
            if prev is not None:
                assert np.all(vals >= prev - 1e-9 * (1 + np.abs(prev)))
            prev = vals
            assert np.all(stages.angles(s).phi > 0)


def test_angles_examples():
    d = stages.angles(eff.scalar_state())
    assert d.xi.tolist() == [[1.0]] and d.psi.tolist() == [1.0] and d.phi.tolist() == [1.0]
    assert d.zeta == 1 and d.adot_over_c2 == 1 and d.adot_over_a2 == 1 and d.bi_over_ci.tolist() == [1.0]
    d = stages.angles(EffectiveState([1, 0], np.eye(2), [0, 1]))
    assert d.zeta == 0 and not d.zeta_degenerate


def test_angles_zero_state_flags_everything():
    d = stages.angles(zero_state(3))
    assert d.xi_degenerate.all() and d.psi_degenerate.all() and d.phi_degenerate.all()
    assert d.zeta_degenerate and d.ratio_degenerate.all() and d.bi_over_ci_degenerate.all()
    assert not np.any(d.xi) and d.zeta == 0 and d.adot_over_c2 == 0


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20))
def test_angles_scale_invariant(seed, scale):
    s = eff.random_state(4, np.random.default_rng(seed))
    d1, d2 = stages.angles(s), stages.angles(s.scaled(scale))
    for f in ("xi", "psi", "phi", "zeta"):
        np.testing.assert_allclose(getattr(d1, f), getattr(d2, f), atol=1e-9)
    assert np.all(np.abs(d1.xi) <= 1) and np.allclose(d1.xi, d1.xi.T)


def test_partition_examples(scalar_run):
    p = stages.partition(scalar_run)
    assert p.c1 == (0,) and p.c2 == ()
    # the second column of b and c_2 start at zero and stay there
    s = EffectiveState([1.0, 0.3], [[1.0, 0.0], [0.5, 0.0]], [1.0, 0.0])
    p = stages.partition(eff.integrate(s), rel_threshold=0.01)
    assert p.c1 == (0,) and p.c2 == (1,)
    with pytest.raises(PreconditionError):
        stages.partition(eff.integrate(zero_state(), t_end=1.0))


def test_partition_tie_goes_to_c1(scalar_run):
    p = stages.partition(scalar_run, rel_threshold=1.0)
    assert p.c1 == (0,)


def test_verdict_scalar(scalar_run):
    v = stages.condensation_verdict(scalar_run)
    assert v.condensed and v.min_cos_xi_on_c1 == 1.0
    assert v.min_abs_c_on_c1 >= 1e3 / 2
    with pytest.raises(PreconditionError):
        stages.condensation_verdict(eff.integrate(eff.balanced_example(), t_end=50.0))


def test_verdict_small_init_alignment(small_init_runs):
    for traj in small_init_runs:
        assert traj.stop_reason is StopReason.ENERGY_CEILING
        v = stages.condensation_verdict(traj)
        assert v.min_cos_xi_on_c1 >= 0.99
        assert v.min_cos_psi_on_c1 >= 0.99
        assert v.ratio_errors["adot_c2"] <= 1e-2
        assert v.ratio_errors["max_bi_ci_dev"] <= 1e-2


def test_upper_bound(scalar_run):
    b = eff.blowup_bracket(scalar_run)
    assert stages.upper_bound_check(scalar_run, b.fit_from_t, b.c_estimate).valid
    assert stages.upper_bound_check(scalar_run, b.fit_from_t, 10 * b.c_estimate).valid
    with pytest.raises(PreconditionError):
        stages.upper_bound_check(scalar_run, 0.0, 0.5)


def test_series_rows(scalar_run):
    rows = stages.fsc_series(scalar_run)
    assert len(rows) == len(scalar_run) and all(len(r) == 5 for r in rows)
    rows = stages.angle_series(scalar_run, (0,))
    assert rows[-1][1] == 1.0
