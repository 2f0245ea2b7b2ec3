import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebcharge.env import EnvState
from ebcharge.qnet import (ArchitectureMismatch, FeatureBounds, Minibatch, QNetwork, TrainingFault,
                           double_q_targets, encode_state, sync_target, td_update)


def finite_difference_grad(net, x, actions, targets, h=3e-5):
    """Independent route: central differences of the mean squared error.

    The step balances roundoff (tiny gradients near 1e-7) against crossing ReLU kinks.
    """
    theta = net.get_flat()

    def loss(th):
        net.set_flat(th)
        q = net.forward(x)
        return np.mean((q[np.arange(len(actions)), actions] - targets) ** 2)

    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (loss(theta + e) - loss(theta - e)) / (2 * h)
    net.set_flat(theta)
    return g


def analytic_grad(net, x, actions, targets):
    _, gW, gb = net.loss_and_grads(x, actions, targets)
    return np.concatenate([p.ravel() for pair in zip(gW, gb) for p in pair])


def gradient_relative_error(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    net = QNetwork(sizes, seed=seed)
    assert net.n_params() <= 50
    n = 6
    x = rng.normal(size=(n, sizes[0]))
    a = rng.integers(0, sizes[-1], size=n)
    y = rng.normal(size=n)
    ga, gf = analytic_grad(net, x, a, y), finite_difference_grad(net, x, a, y)
    return np.max(np.abs(ga - gf) / np.maximum(1e-8, np.abs(ga) + np.abs(gf)))


def test_zero_network_outputs_zero():
    net = QNetwork((3, 4, 2))
    net.set_flat(np.zeros(net.n_params()))
    np.testing.assert_array_equal(net.forward(np.ones(3)), np.zeros(2))


def test_identity_network():
    net = QNetwork((3, 3))
    net.W[0] = np.eye(3)
    net.b[0] = np.zeros(3)
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(net.forward(x), x)


def test_seeded_init_is_reproducible():
    x = np.linspace(-1, 1, 5)
    a, b = QNetwork((5, 8, 3), seed=4), QNetwork((5, 8, 3), seed=4)
    assert np.array_equal(a.forward(x), b.forward(x))


def test_dimension_mismatch_rejected():
    with pytest.raises(ArchitectureMismatch):
        QNetwork((3, 2)).forward(np.ones(4))


def _batch(feat, action, reward, next_feat, done, n_out):
    return Minibatch(np.atleast_2d(feat), np.array([action]), np.array([reward]), np.atleast_2d(next_feat),
                     np.array([done]), np.ones((1, n_out), bool))


def _constant_net(values):
    net = QNetwork((1, len(values)))
    net.W[0] = np.zeros((1, len(values)))
    net.b[0] = np.asarray(values, float)
    return net


def test_target_arithmetic():
    online = _constant_net([0.0, 1.0])  # argmax = 1
    target = _constant_net([5.0, -2.0])
    y = double_q_targets(online, target, _batch([0.0], 0, -0.5, [0.0], False, 2))
    assert y[0] == pytest.approx(-2.5)


def test_terminal_record_has_no_bootstrap():
    online, target = _constant_net([0.0, 1.0]), _constant_net([5.0, -2.0])
    y = double_q_targets(online, target, _batch([0.0], 0, -50.0, [0.0], True, 2))
    assert y[0] == -50.0


def test_double_q_uses_online_argmax_and_target_value():
    online = _constant_net([1.0, 3.0, 2.0])
    target = _constant_net([10.0, 0.5, 7.0])
    # online picks 1 (target would pick 0): y must read the target at index 1
    y = double_q_targets(online, target, _batch([0.0], 0, 0.0, [0.0], False, 3))
    assert y[0] == 0.5
    b = _batch([0.0], 0, 0.0, [0.0], False, 3)
    b.next_mask[0, 1] = False
    assert double_q_targets(online, target, b)[0] == 7.0


def test_td_update_returns_pre_step_loss_and_moves_towards_target():
    net = QNetwork((2, 8, 2), lr=1e-2, seed=1)
    tgt = net.clone()
    x = np.array([[0.3, -0.2]])
    b = Minibatch(x, np.array([1]), np.array([3.0]), x, np.array([True]), np.ones((1, 2), bool))
    before = (net.forward(x[0])[1] - 3.0) ** 2
    loss = td_update(net, tgt, b)
    assert loss == pytest.approx(before)
    assert (net.forward(x[0])[1] - 3.0) ** 2 < before


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    assert gradient_relative_error(seed) < 1e-4


def test_overfit_fixed_batch():
    rng = np.random.default_rng(0)
    net = QNetwork((4, 32, 32, 3), lr=1e-3, seed=0)
    x = rng.normal(size=(10, 4))
    a = rng.integers(0, 3, size=10)
    y = rng.normal(size=10)
    for _ in range(10_000):
        net.fit_targets(x, a, y)
    assert net.loss_and_grads(x, a, y)[0] < 1e-6


def test_sync_copies_and_decouples():
    rng = np.random.default_rng(2)
    online, target = QNetwork((3, 6, 2), seed=1), QNetwork((3, 6, 2), seed=2)
    probes = rng.normal(size=(20, 3))
    sync_target(online, target)
    np.testing.assert_array_equal(online.forward(probes), target.forward(probes))
    sync_target(online, target)
    np.testing.assert_array_equal(online.forward(probes), target.forward(probes))
    b = Minibatch(probes[:4], np.zeros(4, int), np.ones(4), probes[:4], np.ones(4, bool), np.ones((4, 2), bool))
    td_update(online, target, b)
    assert not np.array_equal(online.forward(probes), target.forward(probes))


def test_sync_rejects_other_architecture():
    with pytest.raises(ArchitectureMismatch):
        sync_target(QNetwork((3, 4, 2)), QNetwork((3, 5, 2)))


def test_non_finite_loss_is_a_training_fault():
    net = QNetwork((2, 2))
    with pytest.raises(TrainingFault):
        net.fit_targets(np.ones((1, 2)), np.array([0]), np.array([np.nan]))


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork((3, 5, 2), seed=3)
    net.fit_targets(np.ones((2, 3)), np.array([0, 1]), np.array([1.0, -1.0]))
    net.save(tmp_path / "n.npz")
    back = QNetwork.load(tmp_path / "n.npz")
    x = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(back.forward(x), net.forward(x)) and back.steps == 1
    with pytest.raises(ArchitectureMismatch):
        QNetwork.load(tmp_path / "n.npz", expected_sizes=(3, 6, 2))


BOUNDS = FeatureBounds(0.0, 240.0, 8, 11, 0.015, 0.045)


def _s(soc, tau=3, k=2, prices=(0.02,) * 5):
    return EnvState(soc, 1, tau, prices, k, 10)


def test_encoding_bounds():
    assert encode_state(_s(240.0), None, BOUNDS)[0] == 1.0
    assert encode_state(_s(0.0), None, BOUNDS)[0] == -1.0
    unit = FeatureBounds(0.0, 240.0, 8, 11, 0.015, 0.045, scheme="unit")
    assert encode_state(_s(0.0), None, unit)[0] == 0.0


def test_encoding_is_deterministic_and_appends_option():
    a = encode_state(_s(100.0), 120.0, BOUNDS)
    b = encode_state(_s(100.0), 120.0, BOUNDS)
    assert np.array_equal(a, b) and a.size == 10
    assert a[-1] == pytest.approx(0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 300), st.integers(0, 12), st.integers(0, 15),
       st.lists(st.floats(0.0, 0.1), min_size=5, max_size=5), st.floats(-10, 260))
def test_features_stay_in_range(soc, tau, k, prices, option):
    f = encode_state(EnvState(soc, 1, tau, tuple(prices), k, 0), option, BOUNDS)
    assert np.all(f >= -1.0) and np.all(f <= 1.0)
