"""Black-box image-based controller interface and a desk-scale surrogate.

The surrogate stands in for a trained vision policy.  Each query adds seeded
Gaussian noise to the true state, rasterises the noisy state into a 64x64
frame, estimates the state back from pixels (velocities are supplied
directly, as the original controllers received them alongside the image) and
applies a reference control law.  Actions therefore reach the plant only
through the image channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import PlantParams, step
from .errors import ContractViolation, OracleError, SimulationError

FRAME = 64
PIVOT = 32.0
ROD_LENGTH = 24.0
_CHUNK = 2048

# Pixel placement for the mountain car and the cart-pole.
MC_X_RANGE = (-1.5, 1.0)
MC_Y_SCALE = 24.0
MC_DOT_RADIUS = 2.5
CP_PX_PER_M = 10.0
CP_CART_ROW = 50.0
CP_CART_HALF = (2.5, 5.0)  # rows, cols
CP_POLE_LENGTH = 20.0

# Default sensing noise per benchmark: (low, high) rows of the sensitivity study.
NOISE_PRESETS = {
    "IP": {"low": (0.01, 0.01), "high": (0.1, 0.1)},
    "MC": {"low": (0.01, 0.0001), "high": (0.1, 0.003)},
    "CP": {"low": (0.03,) * 4, "high": (0.1,) * 4},
}
# State dimensions handed to the controller directly instead of through the image.
VELOCITY_DIMS = {"IP": (1,), "MC": (1,), "CP": (1, 3)}

_rows, _cols = np.meshgrid(np.arange(FRAME, dtype=float), np.arange(FRAME, dtype=float), indexing="ij")


def _segment_intensity(r0, c0, r1, c1, half_width: float = 1.5) -> np.ndarray:
    """Anti-aliased segments from ``(r0, c0)`` to ``(r1, c1)``; inputs are ``(n,)``."""
    dr = (r1 - r0)[:, None, None]
    dc = (c1 - c0)[:, None, None]
    pr = _rows[None] - r0[:, None, None]
    pc = _cols[None] - c0[:, None, None]
    len2 = np.maximum(dr * dr + dc * dc, 1e-12)
    t = np.clip((pr * dr + pc * dc) / len2, 0.0, 1.0)
    er = pr - t * dr
    ec = pc - t * dc
    dist = np.sqrt(er * er + ec * ec)
    return np.clip(half_width - dist, 0.0, 1.0)


def _render_ip(states: np.ndarray) -> np.ndarray:
    theta = states[:, 0]
    r0 = np.full_like(theta, PIVOT)
    c0 = np.full_like(theta, PIVOT)
    return _segment_intensity(r0, c0, PIVOT - ROD_LENGTH * np.cos(theta), PIVOT + ROD_LENGTH * np.sin(theta))


def _mc_pixel(x):
    lo, hi = MC_X_RANGE
    xc = np.clip(x, lo, hi)
    col = (xc - lo) / (hi - lo) * (FRAME - 1)
    row = PIVOT - MC_Y_SCALE * np.sin(3.0 * xc)
    return row, col


def _render_mc(states: np.ndarray) -> np.ndarray:
    row, col = _mc_pixel(states[:, 0])
    dr = _rows[None] - row[:, None, None]
    dc = _cols[None] - col[:, None, None]
    return np.clip(MC_DOT_RADIUS - np.sqrt(dr * dr + dc * dc), 0.0, 1.0)


def _cp_cart_col(x):
    return np.clip(PIVOT + CP_PX_PER_M * x, 6.0, FRAME - 7.0)


def _render_cp(states: np.ndarray) -> np.ndarray:
    col = _cp_cart_col(states[:, 0])
    theta = states[:, 2]
    hr, hc = CP_CART_HALF
    out_r = np.abs(_rows[None] - CP_CART_ROW) - hr
    out_c = np.abs(_cols[None] - col[:, None, None]) - hc
    cart = np.clip(0.5 - np.maximum(out_r, out_c), 0.0, 1.0)
    top = np.full_like(col, CP_CART_ROW - hr)
    pole = _segment_intensity(
        top, col, top - CP_POLE_LENGTH * np.cos(theta), col + CP_POLE_LENGTH * np.sin(theta), half_width=1.0
    )
    return np.maximum(cart, pole)


_RENDERERS = {"IP": _render_ip, "MC": _render_mc, "CP": _render_cp}


def render_batch(params: PlantParams, states) -> np.ndarray:
    """Rasterise ``(n, d)`` states into ``(n, 64, 64)`` frames in ``[0, 1]``."""
    s = np.asarray(states, dtype=float)
    if s.ndim != 2 or s.shape[1] != params.state_dim:
        raise ContractViolation(f"expected states of shape (n, {params.state_dim})")
    fn = _RENDERERS[params.benchmark]
    out = np.empty((s.shape[0], FRAME, FRAME), dtype=np.float32)
    for i in range(0, s.shape[0], _CHUNK):
        out[i : i + _CHUNK] = fn(s[i : i + _CHUNK])
    return out


def render(params: PlantParams, s) -> np.ndarray:
    """Deterministic 64x64 grayscale frame of a single state."""
    return render_batch(params, np.asarray(s, dtype=float)[None])[0]


def _axis_angle(w, x, y):
    """Angle from vertical (clockwise positive) of the principal axis through the origin.

    ``w`` holds pixel weights, ``x``/``y`` pixel offsets; the axis is oriented
    toward the intensity centroid.  Blank rows give NaN.
    """
    mass = w.sum(axis=(-2, -1))
    sxx = (w * x * x).sum(axis=(-2, -1))
    syy = (w * y * y).sum(axis=(-2, -1))
    sxy = (w * x * y).sum(axis=(-2, -1))
    mx = (w * x).sum(axis=(-2, -1))
    my = (w * y).sum(axis=(-2, -1))
    phi = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
    dx, dy = np.cos(phi), np.sin(phi)
    flip = dx * mx + dy * my < 0
    dx = np.where(flip, -dx, dx)
    dy = np.where(flip, -dy, dy)
    angle = np.arctan2(dx, dy)
    return np.where(mass > 1e-9, angle, np.nan)


def _decode_ip(frames, partial):
    w = frames.astype(float)
    theta = _axis_angle(w, _cols - PIVOT, PIVOT - _rows)
    return np.stack([theta, partial[:, 0]], axis=-1)


def _decode_mc(frames, partial):
    w = frames.astype(float)
    mass = w.sum(axis=(-2, -1))
    col = (w * _cols).sum(axis=(-2, -1)) / np.where(mass > 1e-9, mass, np.nan)
    lo, hi = MC_X_RANGE
    x = lo + col / (FRAME - 1) * (hi - lo)
    return np.stack([x, partial[:, 0]], axis=-1)


def _decode_cp(frames, partial):
    w = frames.astype(float)
    hr, _ = CP_CART_HALF
    band = (_rows >= CP_CART_ROW) & (_rows <= CP_CART_ROW + hr - 1.0)
    wc = w * band
    mass = wc.sum(axis=(-2, -1))
    col = (wc * _cols).sum(axis=(-2, -1)) / np.where(mass > 1e-9, mass, np.nan)
    x = (col - PIVOT) / CP_PX_PER_M
    top = CP_CART_ROW - hr
    above = _rows <= top - 2.0
    theta = _axis_angle(w * above, _cols - col[:, None, None], top - _rows)
    theta = np.where(np.isnan(theta) & np.isfinite(x), np.pi, theta)
    return np.stack([x, partial[:, 0], theta, partial[:, 1]], axis=-1)


_DECODERS = {"IP": _decode_ip, "MC": _decode_mc, "CP": _decode_cp}


def decode_batch(params: PlantParams, frames, partial) -> np.ndarray:
    """Pixel-level state estimate; rows with a blank frame come back as NaN."""
    frames = np.asarray(frames)
    partial = np.asarray(partial, dtype=float).reshape(frames.shape[0], -1)
    return _DECODERS[params.benchmark](frames, partial)


# Reference control laws -------------------------------------------------------

IP_GAINS = (0.31, 0.21)
IP_SETPOINT = 0.175
# Discrete LQR gain (Q = I, R = 1) of the unit-step cart-pole linearised at the upright state.
CP_GAINS = (-0.0297, -0.1485, -13.5598, -2.3749)


def ip_reference_law(params: PlantParams, gains=IP_GAINS, setpoint: float = IP_SETPOINT):
    """Gravity-compensated PD law holding the rod at ``setpoint``, saturated smoothly by ``u_max * tanh``."""
    k_theta, k_omega = gains
    hold = -params["m"] * params.g * params["L"] * np.sin(setpoint)
    top = max(abs(params.u_min), abs(params.u_max))

    def law(s):
        s = np.asarray(s, dtype=float)
        v = -k_theta * (s[..., 0] - setpoint) - k_omega * s[..., 1] + hold
        return params.clamp(top * np.tanh(v / top))

    return law


def mc_reference_law(params: PlantParams):
    """Energy pumping: push in the direction of motion (``+1`` at rest)."""

    def law(s):
        s = np.asarray(s, dtype=float)
        return params.clamp(np.where(s[..., 1] >= 0.0, 1.0, -1.0))

    return law


def cp_reference_law(params: PlantParams, gains=None):
    k = np.asarray(CP_GAINS if gains is None else gains, dtype=float)

    def law(s):
        s = np.asarray(s, dtype=float)
        return params.clamp(-(s @ k))

    return law


def reference_law(params: PlantParams) -> Callable:
    return {"IP": ip_reference_law, "MC": mc_reference_law, "CP": cp_reference_law}[params.benchmark](params)


def zero_law(params: PlantParams) -> Callable:
    def law(s):
        return np.zeros(np.asarray(s).shape[:-1])

    return law


# Seeded per-query noise -------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def query_normals(seed: int, query_ids, dim: int) -> np.ndarray:
    """Standard normals ``(n, dim)`` that depend only on ``(seed, query_id, k)``."""
    q = np.asarray(query_ids, dtype=np.uint64).reshape(-1)
    base = _splitmix(_splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ q[:, None]) + np.arange(dim, dtype=np.uint64)[None])
    h1 = _splitmix(base)
    h2 = _splitmix(h1 ^ np.uint64(0xD1B54A32D192ED03))
    u1 = ((h1 >> np.uint64(11)).astype(float) + 0.5) / 2.0**53
    u2 = (h2 >> np.uint64(11)).astype(float) / 2.0**53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def query_id(stream, t) -> np.ndarray:
    """Query index of rollout ``stream`` at time ``t``."""
    stream = np.asarray(stream, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _splitmix(stream) ^ np.uint64(t)


# Oracle -----------------------------------------------------------------------


def _identity_generator(params: PlantParams, states):
    return np.asarray(states, dtype=float)


@dataclass(frozen=True)
class HdcOracle:
    """Callable ``(frames, supplied velocities) -> actions`` paired with its image generator.

    ``sigma`` is the per-dimension standard deviation of the Gaussian noise
    added to the true state before the generator is applied.
    """

    params: PlantParams
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray]
    generator: Callable[[PlantParams, np.ndarray], np.ndarray] = render_batch
    sigma: tuple = field(default=())
    name: str = "hdc"

    def __post_init__(self):
        d = self.params.state_dim
        sig = np.zeros(d) if len(self.sigma) == 0 else np.broadcast_to(np.asarray(self.sigma, dtype=float), (d,))
        if np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise ContractViolation("noise standard deviations must be finite and >= 0")
        object.__setattr__(self, "sigma", tuple(float(v) for v in sig))

    @property
    def noisy(self) -> bool:
        return any(v > 0 for v in self.sigma)

    def act(self, states, seed: int = 0, query_ids=None, allow_failures: bool = False) -> np.ndarray:
        """Actions for a batch of true states ``(n, d)``; NaN marks failed queries when allowed."""
        s = np.atleast_2d(np.asarray(states, dtype=float))
        if self.noisy:
            if query_ids is None:
                raise ContractViolation("noisy oracle queries need query ids")
            s = s + query_normals(seed, query_ids, s.shape[1]) * np.asarray(self.sigma)
        frames = self.generator(self.params, s)
        partial = s[:, list(VELOCITY_DIMS[self.params.benchmark])]
        u = np.asarray(self.policy(frames, partial), dtype=float).reshape(-1)
        bad = ~np.isfinite(u)
        if np.any(bad) and not allow_failures:
            raise OracleError(f"oracle failed on {int(bad.sum())} of {len(u)} queries (blank or undecodable frame)")
        return np.where(bad, np.nan, self.params.clamp(u))


def surrogate_oracle(params: PlantParams, sigma=(), law: Callable | None = None) -> HdcOracle:
    """Render, decode from pixels, then apply ``law`` (default: the benchmark reference law)."""
    law = reference_law(params) if law is None else law

    def policy(frames, partial):
        return law(decode_batch(params, frames, partial))

    return HdcOracle(params, policy, render_batch, tuple(np.atleast_1d(sigma)) if np.size(sigma) else (), "surrogate")


def identity_oracle(params: PlantParams, law: Callable | None = None, sigma=()) -> HdcOracle:
    """Decoder-perfect stub: the 'frame' is the (noisy) state itself."""
    law = reference_law(params) if law is None else law

    def policy(frames, partial):
        return law(frames)

    return HdcOracle(params, policy, _identity_generator, tuple(np.atleast_1d(sigma)) if np.size(sigma) else (), "identity")


def surrogate_hdc_act(oracle: HdcOracle, s_true, seed: int = 0, query_index: int = 0) -> float:
    """Single oracle query at a true state."""
    u = oracle.act(np.asarray(s_true, dtype=float)[None], seed, np.array([query_index]))
    return float(u[0])


def hdc_trajectory(oracle: HdcOracle, s0, T: int, seed: int = 0, streams=None, allow_failures: bool = False):
    """Closed-loop rollout driven by the oracle.

    Returns ``(states, actions)``: ``(T + 1, d)`` and ``(T + 1,)`` for a single
    ``s0``, or ``(T + 1, n, d)`` and ``(T + 1, n)`` for a batch.  Actions are
    recorded at every ``t = 0..T``.  With ``allow_failures`` a failing rollout is
    frozen and filled with NaN from the failing step on.
    """
    if T < 0:
        raise ContractViolation("horizon T must be >= 0")
    params = oracle.params
    s = np.asarray(s0, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    n = s.shape[0]
    streams = np.arange(n, dtype=np.uint64) if streams is None else np.asarray(streams, dtype=np.uint64)
    states = np.full((T + 1, n, s.shape[1]), np.nan)
    actions = np.full((T + 1, n), np.nan)
    states[0] = s
    alive = np.ones(n, dtype=bool)
    for t in range(T + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        try:
            u = oracle.act(states[t, idx], seed, query_id(streams[idx], t), allow_failures=allow_failures)
        except OracleError as exc:
            raise SimulationError(f"oracle failed at t={t}: {exc}", time_index=t) from exc
        ok = np.isfinite(u)
        actions[t, idx[ok]] = u[ok]
        alive[idx[~ok]] = False
        if t == T:
            break
        idx = idx[ok]
        nxt = _guarded_step(params, states[t, idx], u[ok], t, allow_failures)
        good = np.all(np.isfinite(nxt), axis=-1)
        states[t + 1, idx[good]] = nxt[good]
        alive[idx[~good]] = False
    if single:
        return states[:, 0], actions[:, 0]
    return states, actions


def _guarded_step(params, s, u, t, allow_failures):
    if not allow_failures:
        try:
            return step(params, s, u)
        except (ArithmeticError, ContractViolation) as exc:
            raise SimulationError(f"step failed at t={t}: {exc}", time_index=t) from exc
    with np.errstate(all="ignore"):
        try:
            return step(params, s, u)
        except ArithmeticError:
            cols = [s[:, k] for k in range(params.state_dim)]
            from .dynamics import _TRANSITIONS

            return np.stack(_TRANSITIONS[params.benchmark](params, cols, u), axis=-1)


def write_pgm(path, frame, comment: str | None = None) -> None:
    """Binary P5 dump of one frame (maxval 255)."""
    img = np.clip(np.rint(np.asarray(frame, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    head = b"P5\n"
    if comment:
        for line in comment.splitlines():
            head += b"# " + line.encode("ascii", "replace") + b"\n"
    head += f"{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head + img.tobytes())
