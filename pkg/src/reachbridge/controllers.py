"""Low-dimensional feedforward controllers: evaluation, interval bounds, Lipschitz bounds, model files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import Box
from .errors import ContractViolation, ParseError

ACTIVATIONS = ("sigmoid", "tanh", "identity")
SLOPE_BOUND = {"sigmoid": 0.25, "tanh": 1.0, "identity": 1.0}
FORMAT_TAG = "reachbridge.ldc"
MODEL_SUFFIX = ".ldc.json"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activate(tag: str, z):
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return _sigmoid(z)
    return z


def activation_derivative(tag: str, z):
    if tag == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if tag == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _derivative_bounds(tag: str, lo, hi):
    """Range of the activation derivative over ``[lo, hi]``.

    tanh' and sigmoid' are even and decrease in ``|z|``, so the maximum sits at
    the point of the interval closest to zero and the minimum at the farthest.
    """
    if tag == "identity":
        one = np.ones_like(lo)
        return one, one
    nearest = np.clip(0.0, lo, hi)
    farthest = np.where(np.abs(lo) > np.abs(hi), lo, hi)
    return activation_derivative(tag, farthest), activation_derivative(tag, nearest)


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        w = np.array(self.weight, dtype=float)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2:
            raise ContractViolation("layer weight must be a matrix")
        if b.shape[0] != w.shape[0]:
            raise ContractViolation(f"bias length {b.shape[0]} does not match {w.shape[0]} outputs")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ContractViolation("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class LdcNetwork:
    """Feedforward network ``s -> u``; the last layer's output is multiplied by ``output_scale``."""

    layers: tuple[Layer, ...]
    output_scale: float = 1.0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ContractViolation("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ContractViolation(
                    f"layer {k} expects {layers[k].in_dim} inputs but layer {k - 1} gives {layers[k - 1].out_dim}"
                )
        if layers[-1].out_dim != 1:
            raise ContractViolation("controller output dimension must be 1")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise ContractViolation("output_scale must be finite and positive")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "output_scale", float(self.output_scale))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return 1

    def __call__(self, s) -> np.ndarray:
        return evaluate(self, s)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LdcNetwork):
            return NotImplemented
        return (
            self.output_scale == other.output_scale
            and len(self.layers) == len(other.layers)
            and all(
                a.activation == b.activation
                and np.array_equal(a.weight, b.weight)
                and np.array_equal(a.bias, b.bias)
                for a, b in zip(self.layers, other.layers)
            )
        )

    __hash__ = None

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "LdcNetwork":
        layers = []
        for k, layer in enumerate(self.layers):
            layers.append(Layer(arrays[2 * k], arrays[2 * k + 1], layer.activation))
        return LdcNetwork(tuple(layers), self.output_scale)


def init_network(
    input_dim: int,
    hidden: Sequence[int] = (20, 20),
    activations: Sequence[str] = ("sigmoid", "tanh"),
    output_activation: str = "tanh",
    output_scale: float = 1.0,
    seed: int = 0,
) -> LdcNetwork:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""
    if len(hidden) != len(activations):
        raise ContractViolation("one activation per hidden layer is required")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, 1]
    tags = [*activations, output_activation]
    layers = []
    for fan_in, fan_out, tag in zip(dims[:-1], dims[1:], tags):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b, tag))
    return LdcNetwork(tuple(layers), output_scale)


def _check_input(net: LdcNetwork, s: np.ndarray):
    if s.shape[-1] != net.input_dim:
        raise ContractViolation(f"network expects {net.input_dim} inputs, got {s.shape[-1]}")


def evaluate(net: LdcNetwork, s) -> np.ndarray:
    """Point evaluation; ``(d,)`` gives a scalar array, ``(n, d)`` gives ``(n,)``."""
    x = np.asarray(s, dtype=float)
    _check_input(net, x)
    for layer in net.layers:
        x = activate(layer.activation, x @ layer.weight.T + layer.bias)
    return net.output_scale * x[..., 0]


def _outward(center, radius):
    """Radius padded to absorb floating-point rounding of the centre/radius form."""
    return radius * (1.0 + 1e-14) + 1e-15 * np.abs(center) + 1e-300


def eval_interval_arrays(net: LdcNetwork, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Interval bound propagation on batched bounds ``(..., d)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    _check_input(net, lo)
    for layer in net.layers:
        mid = 0.5 * (lo + hi)
        rad = 0.5 * (hi - lo)
        zc = mid @ layer.weight.T + layer.bias
        zr = _outward(zc, rad @ np.abs(layer.weight).T)
        lo = activate(layer.activation, zc - zr)
        hi = activate(layer.activation, zc + zr)
    return net.output_scale * lo[..., 0], net.output_scale * hi[..., 0]


def eval_interval(net: LdcNetwork, s_box: Box) -> tuple[float, float]:
    """Sound output range ``(lo, hi)`` of the controller over a box."""
    lo, hi = eval_interval_arrays(net, s_box.lower, s_box.upper)
    return float(lo), float(hi)


def jacobian_interval(net: LdcNetwork, lo, hi):
    """Output range and input-gradient range over batched boxes.

    Returns ``(u_lo, u_hi, j_lo, j_hi)``; the gradient bounds have shape ``(..., d)``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    _check_input(net, lo)
    d = net.input_dim
    batch = lo.shape[:-1]
    jm = np.broadcast_to(np.eye(d), batch + (d, d))
    jr = np.zeros(batch + (d, d))
    for layer in net.layers:
        w = layer.weight
        mid = 0.5 * (lo + hi)
        rad = 0.5 * (hi - lo)
        zc = mid @ w.T + layer.bias
        zr = _outward(zc, rad @ np.abs(w).T)
        z_lo, z_hi = zc - zr, zc + zr
        # pre-activation Jacobian: point matrix times interval matrix
        pm = w @ jm
        pr = np.abs(w) @ jr
        d_lo, d_hi = _derivative_bounds(layer.activation, z_lo, z_hi)
        # row-wise interval product [d_lo, d_hi] * [pm - pr, pm + pr]
        a_lo, a_hi = pm - pr, pm + pr
        dl, dh = d_lo[..., :, None], d_hi[..., :, None]
        cands = np.stack([dl * a_lo, dl * a_hi, dh * a_lo, dh * a_hi])
        j_lo, j_hi = cands.min(axis=0), cands.max(axis=0)
        jm, jr = 0.5 * (j_lo + j_hi), 0.5 * (j_hi - j_lo)
        lo = activate(layer.activation, z_lo)
        hi = activate(layer.activation, z_hi)
    k = net.output_scale
    return k * lo[..., 0], k * hi[..., 0], k * (jm - jr)[..., 0, :], k * (jm + jr)[..., 0, :]


def gradient(net: LdcNetwork, s) -> np.ndarray:
    """Exact input gradient at points ``(..., d)``."""
    x = np.asarray(s, dtype=float)
    _check_input(net, x)
    batch = x.shape[:-1]
    jac = np.broadcast_to(np.eye(net.input_dim), batch + (net.input_dim,) * 2)
    for layer in net.layers:
        z = x @ layer.weight.T + layer.bias
        jac = activation_derivative(layer.activation, z)[..., :, None] * (layer.weight @ jac)
        x = activate(layer.activation, z)
    return net.output_scale * jac[..., 0, :]


def spectral_norm(w, tol: float = 1e-9, max_iter: int = 20000, v0=None):
    """Largest singular value by power iteration on ``W^T W``.

    Returns ``(sigma, u, v)`` with ``W v = sigma u``.  Iteration stops once the
    relative change of ``sigma`` is below ``tol`` and the right vector has settled.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[1]
    if v0 is None:
        v = np.ones(n) / np.sqrt(n)
    else:
        v = np.asarray(v0, dtype=float)
        v = v / np.linalg.norm(v)
    wtw = w.T @ w
    if not np.any(wtw):
        return 0.0, np.zeros(w.shape[0]), v
    x = wtw @ v
    if np.linalg.norm(x) == 0.0:
        # start vector orthogonal to the row space; use a fixed deterministic one
        v = np.cos(np.arange(1, n + 1) * 1.7)
        v /= np.linalg.norm(v)
        x = wtw @ v
    lam = 0.0
    for _ in range(max_iter):
        x = wtw @ v
        nx = np.linalg.norm(x)
        v_new = x / nx
        lam_new = float(v_new @ wtw @ v_new)
        settled = np.linalg.norm(v_new - v) < 1e-9
        done = lam > 0 and abs(lam_new - lam) <= tol * lam_new and settled
        v, lam = v_new, lam_new
        if done:
            break
    sigma = float(np.sqrt(max(lam, 0.0)))
    wv = w @ v
    u = wv / sigma if sigma > 0 else np.zeros(w.shape[0])
    return sigma, u, v


def lipschitz_upper_bound(net: LdcNetwork) -> float:
    """Product over layers of spectral norm times activation slope bound (2-norm)."""
    bound = net.output_scale
    for layer in net.layers:
        sigma, _, _ = spectral_norm(layer.weight)
        bound *= sigma * SLOPE_BOUND[layer.activation]
    return bound


def _num(x: float) -> str:
    return repr(float(x))


def to_dict(net: LdcNetwork) -> dict:
    return {
        "format": FORMAT_TAG,
        "version": 1,
        "input_dim": net.input_dim,
        "output_dim": 1,
        "output_scale": _num(net.output_scale),
        "layers": [
            {
                "in": layer.in_dim,
                "out": layer.out_dim,
                "activation": layer.activation,
                "weight": [[_num(v) for v in row] for row in layer.weight],
                "bias": [_num(v) for v in layer.bias],
            }
            for layer in net.layers
        ],
    }


def serialize(net: LdcNetwork, header: str | None = None) -> bytes:
    doc = to_dict(net)
    if header is not None:
        doc = {"header": header, **doc}
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def _parse_num(value, where: str) -> float:
    if not isinstance(value, (str, int, float)) or isinstance(value, bool):
        raise ParseError("expected a decimal number", where)
    try:
        out = float(value)
    except ValueError:
        raise ParseError(f"bad decimal {value!r}", where) from None
    if not np.isfinite(out):
        raise ParseError("non-finite parameter", where)
    return out


def from_dict(doc) -> LdcNetwork:
    if not isinstance(doc, dict):
        raise ParseError("model must be a JSON object", "$")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list) or not layers_doc:
        raise ParseError("model has no layers", "$.layers")
    layers = []
    for k, ld in enumerate(layers_doc):
        where = f"$.layers[{k}]"
        if not isinstance(ld, dict):
            raise ParseError("layer must be an object", where)
        act = ld.get("activation")
        if act not in ACTIVATIONS:
            raise ParseError(f"unknown activation {act!r}", where + ".activation")
        rows = ld.get("weight")
        if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
            raise ParseError("weight must be a non-empty list of rows", where + ".weight")
        w = np.array(
            [[_parse_num(v, f"{where}.weight[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(rows)]
            if len({len(r) for r in rows}) == 1
            else _ragged(where)
        )
        bias = ld.get("bias")
        if not isinstance(bias, list):
            raise ParseError("bias must be a list", where + ".bias")
        b = np.array([_parse_num(v, f"{where}.bias[{i}]") for i, v in enumerate(bias)])
        for key, actual in (("out", w.shape[0]), ("in", w.shape[1])):
            if key in ld and ld[key] != actual:
                raise ParseError(f"declared {key}={ld[key]} but weight gives {actual}", f"{where}.{key}")
        try:
            layers.append(Layer(w, b, act))
        except ContractViolation as exc:
            raise ParseError(str(exc), where) from None
    scale = _parse_num(doc.get("output_scale", 1.0), "$.output_scale")
    try:
        net = LdcNetwork(tuple(layers), scale)
    except ContractViolation as exc:
        raise ParseError(str(exc), "$.layers") from None
    if "input_dim" in doc and doc["input_dim"] != net.input_dim:
        raise ParseError("input_dim does not match first layer", "$.input_dim")
    return net


def _ragged(where: str):
    raise ParseError("weight rows have different lengths", where + ".weight")


def deserialize(payload: bytes | str) -> LdcNetwork:
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8")
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    return from_dict(doc)


def save(net: LdcNetwork, path, header: str | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(net, header))


def load(path) -> LdcNetwork:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
