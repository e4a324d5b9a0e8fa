import math

import numpy as np
import pytest

from condlab import nn
from condlab.errors import NumericalFailure, PreconditionError, ShapeError

# small 3-d problem whose effective flow stays finite past rescaled time 1
EVF_DATA_SEED, EVF_INIT_SEED = 0, 36


def unit_net(m=1, d=1):
    return nn.ThreeLayerNet(np.ones(m), np.ones((m, m)), np.ones((m, d)))


def zero_net(m=3, d=2):
    return nn.ThreeLayerNet(np.zeros(m), np.zeros((m, m)), np.zeros((m, d)))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    m, d, n = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 8)
    net = nn.ThreeLayerNet(rng.normal(size=m), rng.normal(size=(m, m)), rng.normal(size=(m, d)))
    return net, nn.Dataset(rng.normal(size=(n, d)), rng.normal(size=n))


def evf_data():
    rng = np.random.default_rng(EVF_DATA_SEED)
    x = rng.normal(size=(20, 2))
    return nn.Dataset(x, np.tanh(x @ np.array([1.0, -0.5])))


def numeric_gradient(net, data, h=1e-6):
    theta = net.flat()
    out = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        out[k] = (nn.risk(net.with_flat(theta + e), data) - nn.risk(net.with_flat(theta - e), data)) / (2 * h)
    return out


def test_forward_examples():
    assert nn.forward(zero_net(), [0.3, -2.0]) == 0
    assert nn.forward(unit_net(), [0.0]) == 0
    assert nn.forward(unit_net(), [1.0]) == pytest.approx(math.tanh(math.tanh(1.0)), abs=0)
    assert nn.forward(unit_net(), [1.0]) == pytest.approx(0.64201, abs=1e-5)
    with pytest.raises(ShapeError):
        nn.forward(unit_net(), [1.0, 2.0])


def test_net_validation():
    with pytest.raises(ShapeError):
        nn.ThreeLayerNet(np.ones(2), np.ones((3, 3)), np.ones((2, 1)))
    with pytest.raises(PreconditionError):
        nn.ThreeLayerNet(np.ones(1), np.ones((1, 1)), np.ones((1, 1)), activation="relu")
    assert unit_net().sigma_prime_at_zero == 1.0


def test_risk_examples():
    assert nn.risk(zero_net(), nn.Dataset(np.ones((4, 2)), np.zeros(4))) == 0
    assert nn.risk(zero_net(m=1, d=1), nn.Dataset([[0.7]], [2.0])) == 2
    data = nn.tanh_dataset(100, seed=3)
    brute = sum(math.tanh(x) ** 2 for x in data.inputs[:, 0]) / 200
    assert nn.risk(zero_net(m=5, d=1), data) == pytest.approx(brute, rel=1e-13)
    with pytest.raises(PreconditionError):
        nn.Dataset(np.zeros((0, 1)), np.zeros(0))


def test_dataset_is_seeded_and_in_range():
    a, b = nn.tanh_dataset(100, seed=5), nn.tanh_dataset(100, seed=5)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.n == 100 and a.d == 1
    assert np.all(np.abs(a.inputs) <= math.pi)
    np.testing.assert_array_equal(a.labels, np.tanh(a.inputs[:, 0]))


def test_gradient_zero_case():
    for g in nn.gradient(zero_net(), nn.Dataset(np.ones((3, 2)), np.zeros(3))):
        assert not np.any(g)


def test_gradient_hand_case():
    net, data = unit_net(), nn.Dataset([[1.0]], [0.0])
    ga, gw2, gw1 = nn.gradient(net, data)
    h1 = math.tanh(1.0)
    h2 = math.tanh(h1)
    assert ga[0] == pytest.approx(h2 * h2)
    assert gw2[0, 0] == pytest.approx(h2 * (1 - h2 * h2) * h1)
    assert gw1[0, 0] == pytest.approx(h2 * (1 - h2 * h2) * (1 - h1 * h1))
    np.testing.assert_allclose(np.concatenate([ga, gw2.ravel(), gw1.ravel()]), numeric_gradient(net, data), rtol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_central_differences(seed):
    net, data = random_instance(seed)
    analytic = np.concatenate([g.ravel() for g in nn.gradient(net, data)])
    numeric = numeric_gradient(net, data)
    assert np.all(np.abs(analytic - numeric) <= 1e-6 * np.abs(numeric) + 1e-8)


def test_train_zero_iterations():
    net, data = random_instance(0)
    log = nn.train(net, data, nn.TrainOptions(iters=0))
    assert log.iterations == [0] and log.losses == [nn.risk(net, data)]


def test_train_small_lr_monotone():
    net, data = random_instance(1)
    log = nn.train(net, data, nn.TrainOptions(lr=1e-3, iters=200, log_every=1))
    assert np.all(np.diff(log.losses) <= 1e-15)


def test_train_divergence_reports_checkpoint():
    net, data = random_instance(2)
    with pytest.raises(nn.TrainingDiverged) as info:
        nn.train(net, data, nn.TrainOptions(lr=1e6, iters=500, log_every=1, checkpoint_every=1))
    assert isinstance(info.value, NumericalFailure)
    it, good = info.value.last_checkpoint
    assert np.all(np.isfinite(good.flat()))
    assert np.all(np.isfinite(info.value.log.losses))


def test_checkpoint_resume_matches_continuous_run():
    net, data = random_instance(3)
    opts = nn.TrainOptions(lr=1e-2, iters=300, log_every=50, checkpoint_every=100)
    full = nn.train(net, data, opts)
    ck = full.checkpoints[100]
    rest = nn.train(ck, data, nn.TrainOptions(lr=1e-2, iters=200, log_every=50), start_iter=100)
    np.testing.assert_array_equal(rest.net.flat(), full.net.flat())
    assert rest.iterations == full.iterations[2:]


def test_fixed_schedule_switch():
    net, data = random_instance(4)
    log = nn.train(net, data, nn.TrainOptions(lr=1e-2, iters=20, lr_schedule=[(0, 1e-2), (10, 1e-3)]))
    assert log.lr_changes == [(10, 1e-3)]


def test_train_permutation_equivariant():
    data = nn.tanh_dataset(30, seed=1)
    net = nn.init_net(6, 1, nn.InitSpec(epsilon=0.3, seed=2))
    perm = np.array([3, 0, 5, 1, 4, 2])
    opts = nn.TrainOptions(lr=5e-2, iters=200, log_every=50)
    a = nn.train(net, data, opts).net.permuted(perm)
    b = nn.train(net.permuted(perm), data, opts).net
    np.testing.assert_allclose(b.flat(), a.flat(), atol=1e-12)


def test_plateau_energy_non_decreasing():
    data = nn.tanh_dataset(100, seed=0)
    net = nn.init_net(40, 1, nn.InitSpec(alpha=2.0, seed=0))
    log = nn.train(net, data, nn.TrainOptions(lr=5e-3, iters=8000, log_every=100))
    e = np.array(log.energies)
    assert np.all(np.diff(e) >= -1e-9 * np.maximum(1, np.abs(e[1:])))
    assert np.all(np.isfinite(log.losses))


def test_init_spec():
    assert nn.InitSpec(alpha=2.0).scale(40) == pytest.approx(40**-2)
    assert nn.InitSpec(epsilon=0.1).scale(7) == 0.1
    with pytest.raises(PreconditionError):
        nn.InitSpec().scale(3)
    with pytest.raises(PreconditionError):
        nn.InitSpec(epsilon=-1.0).scale(3)


def test_target_direction_examples():
    np.testing.assert_array_equal(nn.target_direction(nn.Dataset([[1.0, 0.0]], [1.0])), [1, 0])
    np.testing.assert_array_equal(nn.target_direction(nn.Dataset([[1.0, 0.0], [1.0, 0.0]], [1.0, 1.0])), [1, 0])
    np.testing.assert_allclose(
        nn.target_direction(nn.Dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])), [2**-0.5, 2**-0.5]
    )
    with pytest.raises(PreconditionError):
        nn.target_direction(nn.Dataset([[1.0, 0.0]], [0.0]))


def test_cosine_map_examples():
    v = np.array([0.6, 0.8])
    cos = nn.cosine_similarity_map(np.tile(v, (3, 1)), v)
    np.testing.assert_allclose(cos["row_v_cos"], 1)
    np.testing.assert_allclose(cos["pairwise_cos"], 1)
    cos = nn.cosine_similarity_map(np.eye(3), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(cos["row_v_cos"], [1, 0, 0])
    cos = nn.cosine_similarity_map(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 0.0]))
    assert cos["degenerate"].tolist() == [False, True] and cos["row_v_cos"][1] == 0


def test_condensation_alignment_ignores_dormant_rows():
    w1 = np.array([[2.0, 0.0], [-3.0, 0.0], [0.0, 1e-3]])
    assert nn.condensation_alignment(w1, np.array([1.0, 0.0])) == 1.0


def test_fsc_count_examples():
    m = 5
    net = nn.ThreeLayerNet(np.full(m, 1e-3), np.full((m, m), 1e-3), np.full((m, 2), 1e-3))
    assert nn.fsc_count_on_net(net, np.array([0.6, 0.8])) == 2 * m
    assert nn.fsc_count_on_net(zero_net(), np.array([1.0, 0.0])) == 0


def test_effective_vs_full_order():
    data = evf_data()
    errs = []
    for eps in (1e-2, 1e-3):
        net0 = nn.init_net(3, 2, nn.InitSpec(epsilon=eps, seed=EVF_INIT_SEED))
        errs.append(nn.effective_vs_full(net0, data, horizon=1.0, epsilon=eps)["max_rel_err"])
    assert errs[0] <= 0.1
    assert errs[1] < errs[0]


def test_effective_vs_full_preconditions():
    net0 = nn.init_net(3, 2, nn.InitSpec(epsilon=1e-2, seed=0))
    with pytest.raises(PreconditionError):
        nn.effective_vs_full(net0, nn.Dataset(np.ones((4, 2)), np.zeros(4)), 1.0, 1e-2)
    with pytest.raises(PreconditionError):
        nn.effective_vs_full(net0, evf_data(), 1.0, 0.5)
