import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reachbridge import controllers as C
from reachbridge import distill as D
from reachbridge import highdim as H
from reachbridge.dynamics import Box, PlantParams
from reachbridge.errors import ContractViolation

IP = PlantParams("IP")


def test_dataset_counts():
    hdc = H.surrogate_oracle(IP)
    region = Box.from_intervals([(0, 1), (-1, 0)])
    one = D.generate_dataset(hdc, IP, region, 1, 0, seed=4)
    assert len(one) == 1
    np.testing.assert_array_equal(one.states[0], region.sample(np.random.default_rng(4), 1)[0])
    assert len(D.generate_dataset(hdc, IP, region, 3, 4, seed=1)) == 15


def test_zero_teacher_at_equilibrium():
    hdc = H.surrogate_oracle(IP, law=H.zero_law(IP))
    data = D.generate_dataset(hdc, IP, Box.point([0.0, 0.0]), 2, 5)
    assert np.all(data.states == 0) and np.all(data.actions == 0)


def test_two_objective_examples():
    np.testing.assert_allclose(D.two_objective_step([1, 0], [1, 0]), [1, 0])
    np.testing.assert_allclose(D.two_objective_step([1, 0], np.array([-1, 1]) / np.sqrt(2)), [0.5, 0.5], atol=1e-15)
    np.testing.assert_array_equal(D.two_objective_step([0, 0], [0, 0]), [0, 0])
    # a vanishing gradient hands the step to the other objective
    np.testing.assert_array_equal(D.two_objective_step([0, 0], [0.3, -1]), [0.3, -1])
    np.testing.assert_array_equal(D.two_objective_step([2, 0], [0, 0]), [2, 0])
    with pytest.raises(ContractViolation):
        D.two_objective_step([np.nan, 0], [1, 0])


vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


@given(vec, vec)
def test_two_objective_direction_properties(gm, gl):
    d = D.two_objective_step(gm, gl)
    if np.linalg.norm(gm) < 1e-6 or np.linalg.norm(gl) < 1e-6:
        return
    if gm @ gl >= 0:
        # the bisector descends both objectives
        assert d @ gm >= -1e-9 and d @ gl >= -1e-9
    else:
        # the projected step leaves the Lipschitz objective unchanged to first order
        assert abs(d @ gl) <= 1e-9 * np.linalg.norm(gm) * np.linalg.norm(gl) + 1e-12
        assert d @ gm >= -1e-9


def _finite_difference(f, theta, h=1e-6):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    net = C.init_network(2, hidden=(4, 3), seed=seed, output_scale=0.5)
    x = r.normal(size=(16, 2))
    y = r.normal(size=16) * 0.3
    like = net.parameters()
    theta = D.flatten(like)

    def mse(t):
        return D.mse_loss_and_grad(net.with_parameters(D.unflatten(t, like)), x, y)[0]

    def lip(t):
        return D.lipschitz_loss_and_grad(net.with_parameters(D.unflatten(t, like)))[0]

    g_mse = D.flatten(D.mse_loss_and_grad(net, x, y)[1])
    g_lip = D.flatten(D.lipschitz_loss_and_grad(net)[1])
    np.testing.assert_allclose(g_mse, _finite_difference(mse, theta), rtol=1e-4, atol=1e-9)
    np.testing.assert_allclose(g_lip, _finite_difference(lip, theta), rtol=1e-4, atol=1e-8)


def test_lipschitz_loss_equals_bound():
    net = C.init_network(2, seed=9, output_scale=0.15)
    assert D.lipschitz_loss_and_grad(net)[0] == pytest.approx(C.lipschitz_upper_bound(net), rel=1e-8)


def test_constant_teacher():
    r = np.random.default_rng(0)
    data = D.SupervisedDataset(r.uniform(-1, 1, (200, 2)), np.full(200, 0.3))
    net, rep = D.train_ldc(data, D.TrainConfig(eps=1e-4, lam=5, max_epochs=2000, seed=1))
    pred = C.evaluate(net, data.states)
    assert np.mean((pred - 0.3) ** 2) <= 1e-4
    assert rep.met_thresholds and rep.final_mse == pytest.approx(np.mean((pred - 0.3) ** 2))


def test_linear_teacher():
    r = np.random.default_rng(1)
    s = r.uniform(-1, 1, (400, 2))
    data = D.SupervisedDataset(s, -0.5 * s[:, 0] - 0.5 * s[:, 1])
    net, rep = D.train_ldc(data, D.TrainConfig(eps=1e-3, lam=3, max_epochs=3000, seed=2, output_scale=1.0))
    mse = np.mean((C.evaluate(net, s) - data.actions) ** 2)
    assert rep.met_thresholds
    assert mse <= 1e-3 and C.lipschitz_upper_bound(net) <= 3


def test_zero_epochs_returns_initial_network():
    r = np.random.default_rng(2)
    data = D.SupervisedDataset(r.uniform(-1, 1, (50, 2)), np.zeros(50))
    cfg = D.TrainConfig(max_epochs=0, seed=5, eps=1e-12)
    net, rep = D.train_ldc(data, cfg)
    assert net == C.init_network(2, cfg.hidden, cfg.activations, cfg.output_activation, cfg.output_scale, 5)
    assert rep.epochs == 0 and not rep.met_thresholds
    assert rep.final_mse == pytest.approx(np.mean(C.evaluate(net, data.states) ** 2))


def test_training_is_deterministic():
    r = np.random.default_rng(3)
    s = r.uniform(-1, 1, (100, 2))
    data = D.SupervisedDataset(s, 0.1 * s[:, 0])
    cfg = D.TrainConfig(max_epochs=20, seed=3)
    assert D.train_ldc(data, cfg)[0] == D.train_ldc(data, cfg)[0]


def test_contracts():
    with pytest.raises(ContractViolation):
        D.TrainConfig(eps=0)
    with pytest.raises(ContractViolation):
        D.SupervisedDataset(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ContractViolation):
        D.SupervisedDataset(np.zeros((0, 2)), np.zeros(0))
