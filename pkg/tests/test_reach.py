import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reachbridge import reach as R
from reachbridge.conformal import ACTION, DiscrepancyBound, ldc_policy
from reachbridge.controllers import Layer, LdcNetwork, init_network
from reachbridge.dynamics import _TRANSITIONS, Box, PlantParams, simulate, step
from reachbridge.errors import ContractViolation

IP = PlantParams("IP")
MC = PlantParams("MC")
ENGINES = R.ENGINES


def constant_net(value, d=2):
    return LdcNetwork((Layer(np.zeros((1, d)), np.array([value]), "identity"),))


@pytest.mark.parametrize("engine", ENGINES)
def test_identity_plant_keeps_region(engine, monkeypatch):
    monkeypatch.setitem(_TRANSITIONS, "IP", lambda p, s, u: list(s))
    region = Box.from_intervals([(0, 1), (-1, 0.5)])
    tube = R.reach_tube_ldc(init_network(2, seed=0), IP, region, 5, engine=engine)
    assert len(tube) == 6
    for t in range(6):
        np.testing.assert_allclose(tube.hull(t).lower, region.lower, atol=1e-12)
        np.testing.assert_allclose(tube.hull(t).upper, region.upper, atol=1e-12)


@pytest.mark.parametrize("engine", ENGINES)
def test_point_region_matches_step(engine):
    tube = R.reach_tube_ldc(constant_net(0.125), IP, Box.point([0.0, 0.0]), 1, engine=engine)
    np.testing.assert_allclose(tube.hull(0).lower, [0, 0], atol=1e-12)
    np.testing.assert_allclose(tube.hull(1).lower, [0, 1], atol=1e-12)
    np.testing.assert_allclose(tube.hull(1).upper, [0, 1], atol=1e-12)


def _mc_net(seed):
    # a pushing policy with a smooth sign so trajectories spread
    net = init_network(2, hidden=(8, 8), seed=seed)
    return net


@pytest.mark.parametrize("engine", ENGINES)
@pytest.mark.parametrize("seed", range(4))
def test_monte_carlo_containment(engine, seed):
    r = np.random.default_rng(seed)
    for params, center, width, T, scale in [
        (IP, [r.uniform(0, 2), r.uniform(-2, 0)], 0.05, 30, 0.15),
        (MC, [r.uniform(-0.6, -0.4), r.uniform(-0.02, 0.05)], 0.01, 60, 1.0),
    ]:
        net = init_network(2, hidden=(8, 8), seed=seed, output_scale=scale)
        region = Box(np.array(center) - width / 2, np.array(center) + width / 2)
        try:
            tube = R.reach_tube_ldc(net, params, region, T, engine=engine)
        except Exception as exc:  # divergent enclosures are sound but useless
            assert "non-finite" in str(exc)
            continue
        traj = simulate(params, ldc_policy(net, params), region.sample(r, 1000), T)
        assert np.all(tube.contains(traj))


@pytest.mark.parametrize("engine", ENGINES)
def test_split_depth_tightens_or_keeps(engine):
    net = init_network(2, hidden=(8, 8), seed=1, output_scale=0.15)
    region = Box.from_intervals([(0.5, 0.6), (-1.0, -0.9)])
    coarse = R.reach_tube_ldc(net, IP, region, 5, engine=engine)
    fine = R.reach_tube_ldc(net, IP, region, 5, engine=engine, split_depth=1)
    assert np.all(fine.hull(5).lower >= coarse.hull(5).lower - 1e-9)
    assert np.all(fine.hull(5).upper <= coarse.hull(5).upper + 1e-9)


def test_trajectory_inflation():
    tube = R.reach_tube_ldc(constant_net(0.0), IP, Box.from_intervals([(0, 1), (0, 1)]), 0)
    assert R.inflate_tube_trajectory(tube, 0.0) == tube
    wide = R.inflate_tube_trajectory(tube, 0.1)
    np.testing.assert_allclose(wide.hull(0).lower, [-0.1, -0.1])
    np.testing.assert_allclose(wide.hull(0).upper, [1.1, 1.1])
    assert R.inflate_tube_trajectory(tube, np.inf).unverifiable
    with pytest.raises(ContractViolation):
        R.inflate_tube_trajectory(tube, -1.0)


def test_trajectory_inflation_covers_l1_ball(rng):
    tube = R.reach_tube_ldc(constant_net(0.0), IP, Box.from_intervals([(0, 1), (0, 1)]), 0)
    beta = 0.2
    wide = R.inflate_tube_trajectory(tube, beta)
    for corner in ([0, 0], [0, 1], [1, 0], [1, 1]):
        v = rng.normal(size=(2000, 2))
        v = v / np.abs(v).sum(axis=1, keepdims=True) * beta * rng.uniform(0, 1, (2000, 1))
        assert np.all(wide[0].contains(np.array(corner) + v))


@pytest.mark.parametrize("engine", ENGINES)
def test_action_inflation_examples(engine):
    region = Box.from_intervals([(0.2, 0.3), (-0.5, -0.4)])
    net = init_network(2, seed=2, output_scale=0.15)
    plain = R.reach_tube_ldc(net, IP, region, 4, engine=engine)
    zero = R.reach_tube_action_inflated(net, IP, region, 4, 0.0, engine=engine)
    np.testing.assert_array_equal(plain.lower, zero.lower)
    np.testing.assert_array_equal(plain.upper, zero.upper)
    tube = R.reach_tube_action_inflated(constant_net(0.0), IP, Box.point([0.0, 0.0]), 1, 0.125, engine=engine)
    np.testing.assert_allclose(tube.hull(1).lower, [0, -1], atol=1e-12)
    np.testing.assert_allclose(tube.hull(1).upper, [0, 1], atol=1e-12)
    bound = DiscrepancyBound(ACTION, np.inf, 0.05, 60)
    assert R.reach_tube_action_inflated(net, IP, region, 4, bound).unverifiable


@pytest.mark.parametrize("engine", ENGINES)
@given(g1=st.floats(0, 0.01), g2=st.floats(0, 0.01), seed=st.integers(0, 50))
def test_action_inflation_is_monotone(engine, g1, g2, seed):
    g1, g2 = sorted((g1, g2))
    net = init_network(2, hidden=(6, 6), seed=seed, output_scale=0.15)
    region = Box.from_intervals([(0.2, 0.25), (-0.5, -0.45)])
    a = R.reach_tube_action_inflated(net, IP, region, 6, g1, engine=engine)
    b = R.reach_tube_action_inflated(net, IP, region, 6, g2, engine=engine)
    assert np.all(b.lower <= a.lower + 1e-12) and np.all(a.upper <= b.upper + 1e-12)


@pytest.mark.parametrize("engine", ENGINES)
def test_action_inflated_tube_contains_disturbed_rollouts(engine, rng):
    net = init_network(2, hidden=(8, 8), seed=5, output_scale=0.15)
    region = Box.from_intervals([(0.3, 0.35), (-0.6, -0.55)])
    gamma, T = 0.002, 10
    tube = R.reach_tube_action_inflated(net, IP, region, T, gamma, engine=engine)
    s = region.sample(rng, 500)
    traj = [s]
    for _ in range(T):
        u = IP.clamp(net(s) + rng.uniform(-gamma, gamma, len(s)))
        s = step(IP, s, u)
        traj.append(s)
    assert np.all(tube.contains(np.array(traj)))


def test_union():
    a = R.reach_tube_ldc(constant_net(0.0), IP, Box.point([0.0, 0.0]), 2)
    b = R.reach_tube_ldc(constant_net(0.0), IP, Box.point([0.1, 0.0]), 2)
    assert R.union_tubes([a]) is a
    u = R.union_tubes([a, b])
    traj_a = simulate(IP, lambda s: 0.0, [0.0, 0.0], 2)
    traj_b = simulate(IP, lambda s: 0.0, [0.1, 0.0], 2)
    assert u.contains(traj_a)[0] and u.contains(traj_b)[0]
    for t in range(3):
        assert np.all(u[t].contains(a.lower[t])) and np.all(u[t].contains(b.upper[t]))


def test_goal_checks():
    G = Box.from_intervals([(0, 0.35), (-np.inf, np.inf)])
    inside = R.ReachTube(np.array([[0.1, -1.0]] * 3), np.array([[0.2, 1.0]] * 3))
    assert R.check_goal(inside, G)
    straddle = R.ReachTube(np.array([[0.1, -1.0]] * 3), np.array([[0.4, 1.0]] * 3))
    assert not R.check_goal(straddle, G)
    mc_goal = Box.from_intervals([(0.45, np.inf), (-np.inf, np.inf)])
    final = R.ReachTube(np.array([[-0.5, 0.0], [0.5, 0.0]]), np.array([[-0.4, 0.01], [0.6, 0.02]]))
    assert R.check_goal(final, mc_goal)
    assert not R.check_goal(final, mc_goal, R.FROM_STEP, 0)
    assert R.check_goal(final, mc_goal, R.FROM_STEP, 1)
    assert not R.check_goal(R.ReachTube.sentinel(1, 2), Box.from_intervals([(-np.inf, np.inf)] * 2))


def test_tube_csv():
    tube = R.reach_tube_ldc(constant_net(0.125), IP, Box.point([0.0, 0.0]), 1)
    lines = R.tube_csv(tube, "# hdr").splitlines()
    assert lines[0] == "# hdr" and lines[1] == "t,box,lo0,lo1,hi0,hi1"
    assert len(lines) == 4
