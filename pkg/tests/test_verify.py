import json

import numpy as np
import pytest

from reachbridge import conformal as K
from reachbridge import highdim as H
from reachbridge import verify as V
from reachbridge.controllers import init_network
from reachbridge.distill import TrainConfig
from reachbridge.dynamics import _TRANSITIONS, Box, PlantParams
from reachbridge.errors import ContractViolation

IP = PlantParams("IP")
S0 = Box.from_intervals([(0, 2), (-2, 0)])
G = Box.from_intervals([(0, 0.35), (-np.inf, np.inf)])
EVERYWHERE = Box.from_intervals([(-np.inf, np.inf)] * 2)


def cfg(**kw):
    base = dict(approach=V.ACTION, T=30, goal=G, xi=1.0, region_widths=(1.0, 1.0), train=TrainConfig(max_epochs=5))
    base.update(kw)
    return V.VerifyConfig(**base)


def manual(net, value, region=S0, kind=K.ACTION):
    bound = K.DiscrepancyBound(kind, value, 0.05, 60, region)
    return [V.RegionResult(region, net, bound, None, "ldc-test")]


def test_grid_tiles_initial_set():
    grid = V.GridSpec(S0, (0.3, 0.5))
    lo, hi = grid.bounds()
    assert grid.shape == (7, 4) and len(grid) == 28 == lo.shape[0]
    assert np.sum(np.prod(hi - lo, axis=1)) == pytest.approx(4.0)
    assert np.all(hi[:, 0] <= 2.0) and lo.min(axis=0).tolist() == [0, -2]
    r = np.random.default_rng(0)
    pts = S0.sample(r, 2000)
    inside = (pts[:, None] >= lo[None]) & (pts[:, None] < hi[None])
    assert np.all(np.sum(np.all(inside, axis=-1), axis=1) == 1)
    assert V.GridSpec(S0, (0.05, 0.05)).shape == (40, 40)


def test_config_contracts():
    with pytest.raises(ContractViolation):
        cfg(alpha=1.5)
    with pytest.raises(ContractViolation):
        cfg(xi=0.0)
    with pytest.raises(ContractViolation):
        V.GridSpec(S0, (0.0, 1.0))


def test_seeds_are_deterministic_and_distinct():
    a = V.derive_seed(0, "r1", "data")
    assert a == V.derive_seed(0, "r1", "data")
    assert len({a, V.derive_seed(0, "r2", "data"), V.derive_seed(0, "r1", "calibrate"), V.derive_seed(1, "r1", "data")}) == 4


def test_score_example():
    v = V.VerdictMap(
        np.zeros((20, 1)), np.ones((20, 1)),
        np.array([1] * 8 + [0] * 2 + [0] * 9 + [1]), np.array([1] * 8 + [1] * 2 + [0] * 9 + [0]),
        np.zeros(20), [""] * 20, [""] * 20,
    )
    m = V.score(v)
    assert (m.tp, m.fn, m.tn, m.fp) == (8, 2, 9, 1)
    assert m.tpr == pytest.approx(0.8) and m.tnr == pytest.approx(0.9)
    assert m.precision == pytest.approx(0.8889, abs=1e-4) and m.f1 == pytest.approx(0.8421, abs=1e-4)
    perfect = V.score(v.with_ground_truth(v.verdict))
    assert perfect.tpr == perfect.tnr == perfect.precision == perfect.f1 == 1.0
    none = V.score(v.with_ground_truth(v.verdict).__class__(**{**v.__dict__, "verdict": np.zeros(20, int)}))
    assert none.precision is None
    assert json.loads(V.metrics_json(none))["metrics"]["precision"] is None


def test_score_excludes_unknown():
    v = V.VerdictMap(np.zeros((3, 1)), np.ones((3, 1)), np.array([1, 1, 0]), np.array([1, -1, 0]), np.zeros(3), [""] * 3, [""] * 3)
    m = V.score(v)
    assert (m.tp, m.fp, m.tn, m.fn) == (1, 0, 1, 0)
    with pytest.raises(ContractViolation):
        V.score(v.with_ground_truth([-1, -1, -1]))


def test_goal_everywhere_means_all_safe():
    net = init_network(2, seed=0, output_scale=0.15)
    c = cfg(goal=EVERYWHERE)
    vm = V.end_to_end_verify(H.surrogate_oracle(IP), IP, c, V.GridSpec(S0, (0.5, 0.5)), manual(net, 0.01))
    assert np.all(vm.verdict == V.SAFE) and len(vm) == 16


def test_infinite_bound_is_unsafe():
    net = init_network(2, seed=0, output_scale=0.15)
    c = cfg(goal=EVERYWHERE)
    vm = V.end_to_end_verify(H.surrogate_oracle(IP), IP, c, V.GridSpec(S0, (0.5, 0.5)), manual(net, np.inf))
    assert np.all(vm.verdict == V.UNSAFE)
    assert all("infinite bound" in n for n in vm.notes)
    vm = V.end_to_end_verify(
        H.surrogate_oracle(IP), IP, cfg(goal=EVERYWHERE, approach=V.TRAJECTORY), V.GridSpec(S0, (1.0, 1.0)),
        manual(net, np.inf, kind=K.TRAJECTORY),
    )
    assert np.all(vm.verdict == V.UNSAFE)


def test_uncovered_cells_are_unsafe():
    net = init_network(2, seed=0, output_scale=0.15)
    half = Box.from_intervals([(0, 1), (-2, 0)])
    vm = V.end_to_end_verify(H.surrogate_oracle(IP), IP, cfg(goal=EVERYWHERE), V.GridSpec(S0, (1.0, 2.0)), manual(net, 0.0, half))
    assert vm.verdict.tolist() == [V.SAFE, V.UNSAFE]


@pytest.mark.parametrize("approach", V.APPROACHES)
def test_verdicts_monotone_in_bound(approach):
    net = init_network(2, hidden=(8, 8), seed=3, output_scale=0.15)
    goal = Box.from_intervals([(-3, 3), (-6, 6)])
    grid = V.GridSpec(Box.from_intervals([(0, 0.5), (-0.5, 0)]), (0.1, 0.1))
    kind = K.ACTION if approach == V.ACTION else K.TRAJECTORY
    c = cfg(approach=approach, goal=goal, T=10)
    prev = None
    for value in (0.0, 0.001, 0.01, 0.1, 1.0):
        vm = V.end_to_end_verify(H.surrogate_oracle(IP), IP, c, grid, manual(net, value, grid.S0, kind))
        if prev is not None:
            assert not np.any((prev == V.UNSAFE) & (vm.verdict == V.SAFE))
        prev = vm.verdict


def test_ground_truth_rules(monkeypatch):
    grid = V.GridSpec(Box.from_intervals([(0, 0.3), (-1, 1)]), (0.1, 1.0))
    hdc = H.surrogate_oracle(IP, law=H.zero_law(IP))
    monkeypatch.setitem(_TRANSITIONS, "IP", lambda p, s, u: list(s))
    labels = V.ground_truth(hdc, IP, grid, 5, 4, G, seed=1)
    assert np.all(labels == V.SAFE)
    # cells straddling the goal edge: at least one sample escapes
    tight = Box.from_intervals([(0, 0.25), (-np.inf, np.inf)])
    labels = V.ground_truth(hdc, IP, grid, 20, 4, tight, seed=1)
    assert labels.tolist() == [V.SAFE, V.SAFE, V.UNSAFE, V.UNSAFE, V.UNSAFE, V.UNSAFE][: len(labels)] or labels[-1] == V.UNSAFE
    assert np.array_equal(labels, V.ground_truth(hdc, IP, grid, 20, 4, tight, seed=1))
    with pytest.raises(ContractViolation):
        V.ground_truth(hdc, IP, grid, 0, 4, G)


def test_ground_truth_failure_is_unknown():
    def blank(params, states):
        out = H.render_batch(params, states)
        out[states[:, 0] > 1.0] = 0.0
        return out

    law = H.reference_law(IP)
    hdc = H.HdcOracle(IP, lambda f, p: law(H.decode_batch(IP, f, p)), blank)
    grid = V.GridSpec(Box.from_intervals([(1.5, 1.6), (0.5, 0.6)]), (0.1, 0.1))
    assert V.ground_truth(hdc, IP, grid, 3, 5, EVERYWHERE).tolist() == [V.UNKNOWN]


def test_exact_teacher_needs_no_refinement():
    teacher = init_network(2, hidden=(4, 4), seed=11, output_scale=0.15)
    law = lambda s: IP.clamp(teacher(s))  # noqa: E731
    hdc = H.identity_oracle(IP, law=law)
    region = Box.from_intervals([(0.0, 0.5), (-0.5, 0.0)])
    c = cfg(
        goal=EVERYWHERE, T=5, N=20, n_init=10, xi=0.01, eps=1e-5, lam=50.0, region_widths=(0.5, 0.5),
        train=TrainConfig(max_epochs=300, learning_rate=0.003, hidden=(4, 4), output_scale=0.15, batch_size=16),
    )
    res = V.iterative_training(hdc, IP, c, region)
    assert len(res) == 1 and res[0].depth == 0
    assert res[0].bound.value <= 0.01


def test_forced_splits_respect_round_budget():
    hdc = H.surrogate_oracle(IP)
    region = Box.from_intervals([(0.0, 0.5), (-0.5, 0.0)])
    c = cfg(T=3, N=5, n_init=3, xi=1e-12, max_rounds=1, retry_budget=0, region_widths=(0.5, 0.5), train=TrainConfig(max_epochs=1, output_scale=0.15))
    res = V.iterative_training(hdc, IP, c, region)
    assert len(res) == 4
    for r in res:
        assert r.depth == 1 and np.all(r.region.widths <= 0.25 + 1e-12)
        assert "refinement budget exhausted" in " ".join(r.notes)
    c_inf = cfg(T=3, N=5, n_init=3, xi=np.inf, max_rounds=3, region_widths=(0.25, 0.25), train=TrainConfig(max_epochs=1, output_scale=0.15))
    assert len(V.iterative_training(hdc, IP, c_inf, region)) == 4


def test_verify_is_deterministic():
    net = init_network(2, hidden=(8, 8), seed=3, output_scale=0.15)
    grid = V.GridSpec(Box.from_intervals([(0, 0.5), (-0.5, 0)]), (0.1, 0.1))
    c = cfg(T=10, goal=Box.from_intervals([(-3, 3), (-6, 6)]))
    a = V.end_to_end_verify(H.surrogate_oracle(IP), IP, c, grid, manual(net, 0.001, grid.S0))
    b = V.end_to_end_verify(H.surrogate_oracle(IP), IP, c, grid, manual(net, 0.001, grid.S0))
    assert a.to_csv("# h") == b.to_csv("# h")


def test_svg_map():
    v = V.VerdictMap(np.array([[0, 0], [1, 0]]), np.array([[1, 1], [2, 1]]), np.array([1, 0]), np.array([0, 0]), np.zeros(2), ["a", "b"], ["", ""])
    svg = V.region_map_svg(v)
    assert svg.startswith("<svg") and svg.count("<rect") == 4 and "#2e9b46" in svg and "#c8332f" in svg
