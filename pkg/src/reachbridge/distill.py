"""Supervised distillation of low-dimensional controllers from the image-based oracle.

Training balances two losses: the mean squared action error against the
teacher and a Lipschitz surrogate (product of layer spectral norms).  The
update direction comes from :func:`two_objective_step`, which follows both
gradients when they agree and protects the action fit when they conflict.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .controllers import SLOPE_BOUND, LdcNetwork, activate, activation_derivative, init_network, lipschitz_upper_bound
from .dynamics import Box, PlantParams
from .errors import ContractViolation, OracleError, SimulationError, TrainingError
from .highdim import HdcOracle, hdc_trajectory


@dataclass(frozen=True)
class TrainConfig:
    eps: float = 1e-4
    lam: float = 5.0
    learning_rate: float = 0.01
    max_epochs: int = 5000
    batch_size: int = 32
    seed: int = 0
    hidden: tuple = (20, 20)
    activations: tuple = ("sigmoid", "tanh")
    output_activation: str = "tanh"
    output_scale: float = 1.0
    check_every: int = 10

    def __post_init__(self):
        for name in ("eps", "lam", "learning_rate", "output_scale"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ContractViolation(f"{name} must be finite and > 0, got {value!r}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.check_every < 1:
            raise ContractViolation("max_epochs >= 0, batch_size >= 1 and check_every >= 1 are required")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class SupervisedDataset:
    """State/action pairs; ``states`` is ``(n, d)`` and ``actions`` is ``(n,)``."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        a = np.asarray(self.actions, dtype=float).reshape(-1)
        if s.shape[0] == 0:
            raise ContractViolation("dataset must be non-empty")
        if s.shape[0] != a.shape[0]:
            raise ContractViolation("states and actions must have the same length")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
            raise ContractViolation("dataset entries must be finite")
        s.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    def __len__(self) -> int:
        return self.actions.shape[0]

    def merge(self, other: "SupervisedDataset") -> "SupervisedDataset":
        return SupervisedDataset(np.vstack([self.states, other.states]), np.concatenate([self.actions, other.actions]))


def generate_dataset(
    hdc: HdcOracle, params: PlantParams, region: Box, n_init: int, T: int, seed: int = 0, stream_offset: int = 0
) -> SupervisedDataset:
    """Roll out the oracle from ``n_init`` uniform samples of ``region`` and keep every pair."""
    if n_init < 1:
        raise ContractViolation("n_init must be >= 1")
    if hdc.params.benchmark != params.benchmark:
        raise ContractViolation("oracle and plant refer to different benchmarks")
    s0 = region.sample(np.random.default_rng(seed), n_init)
    streams = np.arange(n_init, dtype=np.uint64) + np.uint64(stream_offset)
    try:
        states, actions = hdc_trajectory(hdc, s0, T, seed, streams)
    except (SimulationError, OracleError) as exc:
        raise SimulationError(f"oracle rollout failed from initial states of {region}: {exc}") from exc
    d = states.shape[-1]
    return SupervisedDataset(states.reshape(-1, d), actions.reshape(-1))


def two_objective_step(grad_mse, grad_lip) -> np.ndarray:
    """Combined descent direction for the MSE and Lipschitz objectives.

    Aligned gradients (``dot >= 0``): the normalised bisector of the two unit
    gradients.  Conflicting gradients: ``grad_mse`` with its component along
    ``grad_lip`` removed.
    """
    gm = np.asarray(grad_mse, dtype=float)
    gl = np.asarray(grad_lip, dtype=float)
    if gm.shape != gl.shape:
        raise ContractViolation("gradients must have the same shape")
    if not (np.all(np.isfinite(gm)) and np.all(np.isfinite(gl))):
        raise ContractViolation("gradients must be finite")
    nm, nl = np.linalg.norm(gm), np.linalg.norm(gl)
    if nl == 0.0:
        return gm.copy()
    if nm == 0.0:
        return gl.copy()
    if gm @ gl >= 0.0:
        bis = gm / nm + gl / nl
        nb = np.linalg.norm(bis)
        return bis / nb
    d = gl / nl
    return gm - (gm @ d) * d


def _forward(net: LdcNetwork, x):
    zs, hs = [], [x]
    for layer in net.layers:
        z = hs[-1] @ layer.weight.T + layer.bias
        zs.append(z)
        hs.append(activate(layer.activation, z))
    return zs, hs


def mse_loss_and_grad(net: LdcNetwork, states, actions):
    """Mean squared action error and its gradient (list aligned with ``net.parameters()``)."""
    x = np.asarray(states, dtype=float)
    y = np.asarray(actions, dtype=float).reshape(-1)
    zs, hs = _forward(net, x)
    pred = net.output_scale * hs[-1][:, 0]
    err = pred - y
    loss = float(np.mean(err * err))
    delta = (2.0 / len(y)) * net.output_scale * err[:, None]
    grads = [None] * (2 * len(net.layers))
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        delta = delta * activation_derivative(layer.activation, zs[k])
        grads[2 * k] = delta.T @ hs[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = delta @ layer.weight
    return loss, grads


def _top_singular(w):
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    return s[0], u[:, 0], vt[0]


def lipschitz_loss_and_grad(net: LdcNetwork):
    """Spectral-norm product bound and its gradient via ``d sigma / dW = u v^T``."""
    tops = [_top_singular(layer.weight) for layer in net.layers]
    slopes = [SLOPE_BOUND[layer.activation] for layer in net.layers]
    factors = [s * k for (s, _, _), k in zip(tops, slopes)]
    bound = net.output_scale * float(np.prod(factors))
    grads = []
    for k, layer in enumerate(net.layers):
        sigma, u, v = tops[k]
        others = net.output_scale * slopes[k] * float(np.prod(factors[:k] + factors[k + 1 :]))
        grads.append(others * np.outer(u, v))
        grads.append(np.zeros_like(layer.bias))
    return bound, grads


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vector, like) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(np.asarray(vector[pos : pos + a.size]).reshape(a.shape))
        pos += a.size
    return out


@dataclass
class TrainReport:
    final_mse: float
    final_lipschitz: float
    max_abs_error: float
    epochs: int
    met_thresholds: bool
    eps: float
    lam: float
    seed: int
    n_samples: int
    history: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = asdict(self)
        doc.pop("history")
        return json.dumps(doc, indent=2, sort_keys=True)


def _evaluate(net, data: SupervisedDataset):
    _, hs = _forward(net, data.states)
    err = net.output_scale * hs[-1][:, 0] - data.actions
    return float(np.mean(err * err)), float(np.max(np.abs(err)))


def train_ldc(data: SupervisedDataset, cfg: TrainConfig, init: LdcNetwork | None = None):
    """Mini-batch two-objective descent; returns ``(network, TrainReport)``.

    The Lipschitz gradient only takes part while the bound exceeds ``cfg.lam``
    (checked at the start of every epoch and after each step while it is active).
    The combined direction drives an Adam update.  Training stops once the
    full-dataset MSE is at most ``eps`` and the bound at most ``lam`` (checked
    every ``check_every`` epochs) or when ``max_epochs`` is reached.
    """
    if len(data) == 0:
        raise ContractViolation("dataset must be non-empty")
    net = init or init_network(
        data.states.shape[1], cfg.hidden, cfg.activations, cfg.output_activation, cfg.output_scale, cfg.seed
    )
    if net.input_dim != data.states.shape[1]:
        raise ContractViolation("network input dimension does not match the dataset")
    like = net.parameters()
    theta = flatten(like)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, tiny = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    history = []
    step_count = 0
    epoch = 0
    mse, max_err = _evaluate(net, data)
    lip = lipschitz_upper_bound(net)
    met = mse <= cfg.eps and lip <= cfg.lam
    while epoch < cfg.max_epochs and not met:
        order = rng.permutation(n)
        # the gate is refreshed once per epoch; within an epoch the bound is tracked only while active
        active = lipschitz_loss_and_grad(net)[0] > cfg.lam
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, g_mse = mse_loss_and_grad(net, data.states[idx], data.actions[idx])
            g_m = flatten(g_mse)
            g_l = np.zeros_like(g_m)
            if active:
                bound, g_lip = lipschitz_loss_and_grad(net)
                active = bound > cfg.lam
                if active:
                    g_l = flatten(g_lip)
            direction = two_objective_step(g_m, g_l)
            if not np.isfinite(loss):
                raise TrainingError("training loss became non-finite", epoch=epoch)
            # Adam moments on the combined direction; the scale of Adam makes the unit bisector usable as is.
            step_count += 1
            m = b1 * m + (1 - b1) * direction
            v = b2 * v + (1 - b2) * direction * direction
            m_hat = m / (1 - b1**step_count)
            v_hat = v / (1 - b2**step_count)
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + tiny)
            if not np.all(np.isfinite(theta)):
                raise TrainingError("parameters became non-finite", epoch=epoch)
            net = net.with_parameters(unflatten(theta, like))
        epoch += 1
        if epoch % cfg.check_every == 0 or epoch == cfg.max_epochs:
            mse, max_err = _evaluate(net, data)
            if not np.isfinite(mse):
                raise TrainingError("training loss became non-finite", epoch=epoch)
            lip = lipschitz_upper_bound(net)
            history.append((epoch, mse, lip))
            met = mse <= cfg.eps and lip <= cfg.lam
    mse, max_err = _evaluate(net, data)
    lip = lipschitz_upper_bound(net)
    met = mse <= cfg.eps and lip <= cfg.lam
    report = TrainReport(mse, lip, max_err, epoch, met, cfg.eps, cfg.lam, cfg.seed, n, history)
    return net, report
