import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reachbridge import controllers as C
from reachbridge.controllers import Layer, LdcNetwork
from reachbridge.dynamics import Box
from reachbridge.errors import ContractViolation, ParseError


def single(w, b, act="identity"):
    return LdcNetwork((Layer(np.atleast_2d(w), np.atleast_1d(b), act),))


def test_constant_network():
    net = single([[0.0, 0.0]], [0.3])
    assert C.evaluate(net, [5.0, -2.0]) == pytest.approx(0.3)
    lo, hi = C.eval_interval(net, Box.from_intervals([(-1, 1), (-3, 2)]))
    assert lo == pytest.approx(0.3, abs=1e-14) and hi == pytest.approx(0.3, abs=1e-14)


def test_dot_product():
    assert C.evaluate(single([[1.0, -1.0]], [0.0]), [2.0, 0.5]) == 1.5


def test_tanh_scalar():
    net = single([[1.0]], [0.0], "tanh")
    assert C.evaluate(net, [1.0]) == pytest.approx(0.7615941559557649, abs=1e-15)
    lo, hi = C.eval_interval(net, Box.from_intervals([(0, 1)]))
    assert lo == pytest.approx(0.0, abs=1e-14) and hi == pytest.approx(np.tanh(1.0), abs=1e-14)


def test_interval_dependency_loss_is_documented():
    # the same input duplicated into two coordinates: true range {0}, interval result [-1, 1]
    net = single([[1.0, -1.0]], [0.0])
    lo, hi = C.eval_interval(net, Box.from_intervals([(0, 1), (0, 1)]))
    assert lo == pytest.approx(-1.0) and hi == pytest.approx(1.0)


def test_lipschitz_examples():
    assert C.lipschitz_upper_bound(single([[2.0]], [0.0])) == pytest.approx(2.0)
    assert C.lipschitz_upper_bound(single([[4.0]], [0.0], "sigmoid")) == pytest.approx(1.0)
    two = LdcNetwork(
        (Layer(np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2), "identity"), Layer(np.array([[1.0, 1.0]]), np.zeros(1), "identity"))
    )
    assert C.lipschitz_upper_bound(two) == pytest.approx(2.0, rel=1e-12)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_spectral_norm_matches_svd(m, n, seed):
    w = np.random.default_rng(seed).normal(size=(m, n))
    sigma = C.spectral_norm(w)[0]
    assert sigma == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-6)


def test_lipschitz_bound_dominates_gradients(rng):
    net = C.init_network(2, seed=3, output_scale=0.15)
    L = C.lipschitz_upper_bound(net)
    g = C.gradient(net, rng.uniform(-3, 3, (2000, 2)))
    assert np.max(np.linalg.norm(g, axis=-1)) <= L * (1 + 1e-12)


def test_gradient_matches_finite_differences(rng):
    net = C.init_network(3, hidden=(5, 4), seed=1)
    x = rng.normal(size=3)
    g = C.gradient(net, x)
    h = 1e-6
    fd = [(C.evaluate(net, x + h * e) - C.evaluate(net, x - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_interval_encloses_samples(seed, width):
    r = np.random.default_rng(seed)
    net = C.init_network(2, hidden=(6, 5), seed=seed, output_scale=2.0)
    lo = r.uniform(-2, 2, 2)
    hi = lo + width * r.uniform(0, 1, 2)
    ulo, uhi = C.eval_interval(net, Box(lo, hi))
    u = C.evaluate(net, r.uniform(lo, hi, (300, 2)))
    assert np.all((u >= ulo) & (u <= uhi))


@given(st.integers(0, 10_000))
def test_jacobian_interval_encloses_gradients(seed):
    r = np.random.default_rng(seed)
    net = C.init_network(2, hidden=(6, 5), seed=seed)
    lo = r.uniform(-2, 2, 2)
    hi = lo + r.uniform(0, 0.5, 2)
    u_lo, u_hi, j_lo, j_hi = C.jacobian_interval(net, lo, hi)
    pts = r.uniform(lo, hi, (200, 2))
    g = C.gradient(net, pts)
    assert np.all(g >= j_lo - 1e-12) and np.all(g <= j_hi + 1e-12)
    u = C.evaluate(net, pts)
    assert np.all(u >= u_lo) and np.all(u <= u_hi)


def test_round_trip(tmp_path):
    net = C.init_network(4, seed=7, output_scale=10.0)
    assert C.deserialize(C.serialize(net)) == net
    path = tmp_path / "m.ldc.json"
    C.save(net, path, header="# test")
    assert C.load(path) == net


def test_hand_written_model_file(tmp_path):
    doc = {"layers": [{"activation": "tanh", "weight": [["0.5"]], "bias": ["-0.25"]}]}
    path = tmp_path / "tiny.ldc.json"
    path.write_text(json.dumps(doc))
    net = C.load(path)
    for x in (-2.0, 0.0, 0.7):
        assert C.evaluate(net, [x]) == pytest.approx(np.tanh(0.5 * x - 0.25), abs=1e-15)


def test_parse_errors():
    with pytest.raises(ParseError):
        C.deserialize(json.dumps({"layers": []}))
    with pytest.raises(ParseError):
        C.deserialize("{not json")
    with pytest.raises(ParseError):
        C.deserialize(json.dumps({"layers": [{"activation": "relu", "weight": [[1]], "bias": [0]}]}))
    with pytest.raises(ParseError):
        C.deserialize(json.dumps({"layers": [{"activation": "tanh", "weight": [[1, 2], [1]], "bias": [0, 0]}]}))


def test_contracts():
    with pytest.raises(ContractViolation):
        LdcNetwork(())
    with pytest.raises(ContractViolation):
        Layer(np.ones((2, 2)), np.ones(3), "tanh")
    with pytest.raises(ContractViolation):
        C.evaluate(single([[1.0]], [0.0]), [1.0, 2.0])
