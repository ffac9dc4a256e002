"""Stochastic closed-loop systems and the two benchmark environments.

A system is ``x' = f(x, u, w)`` with ``u = pi(x)`` and ``w`` drawn from a
product of independent triangular laws.  Both benchmarks are affine in the
disturbance, ``f(x, u, w) = f(x, u, 0) + G w``, which makes the interval
extension over a disturbance box exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, InvalidInput
from .nn import Mlp, forward, ibp_forward, lipschitz_l1


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or lo.size == 0:
            raise InvalidInput("box bounds must be non-empty vectors of equal length")
        if np.any(lo > hi):
            raise InvalidInput(f"box has lo > hi: {lo} vs {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, strict=False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if strict:
            return np.all((x > self.lo) & (x < self.hi), axis=-1)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class TriangularNoise:
    """Independent coordinates ``scale[i] * z`` with ``z`` of density ``1 - |z|`` on [-1, 1]."""

    scale: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=float).reshape(-1)
        if s.size == 0 or np.any(s < 0):
            raise InvalidInput("noise scales must be a non-empty nonnegative vector")
        object.__setattr__(self, "scale", s)

    @property
    def dim(self) -> int:
        return self.scale.size

    @property
    def support(self) -> Box:
        return Box(-self.scale, self.scale)


def sample_noise(noise: TriangularNoise, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Draw one disturbance vector (or ``n`` of them, shape ``(n, p)``)."""
    shape = (noise.dim,) if n is None else (n, noise.dim)
    # difference of two uniforms has the unit triangular law
    z = rng.random(shape) - rng.random(shape)
    return z * noise.scale


def unit_triangular_cdf(z):
    z = np.clip(np.asarray(z, dtype=float), -1.0, 1.0)
    return np.where(z <= 0.0, 0.5 * (1.0 + z) ** 2, 1.0 - 0.5 * (1.0 - z) ** 2)


def noise_cdf(noise: TriangularNoise, coord: int, x):
    s = noise.scale[coord]
    x = np.asarray(x, dtype=float)
    if s == 0.0:
        return np.where(x >= 0.0, 1.0, 0.0)
    return unit_triangular_cdf(x / s)


def clip_action(u):
    return np.clip(u, -1.0, 1.0)


# -- policies ---------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticPolicy:
    """Linear state feedback ``u = -gain @ x``; saturation is left to the dynamics."""

    gain: np.ndarray
    name: str = "analytic"

    def __post_init__(self):
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))

    @property
    def action_dim(self) -> int:
        return self.gain.shape[0]

    @property
    def lipschitz(self) -> float:
        # l1 -> l1 induced norm
        return float(np.abs(self.gain).sum(axis=0).max())

    def __call__(self, x):
        return -np.asarray(x, dtype=float) @ self.gain.T

    def interval(self, box_lo, box_hi):
        c = 0.5 * (box_lo + box_hi)
        r = 0.5 * (box_hi - box_lo)
        mid = -c @ self.gain.T
        rad = r @ np.abs(self.gain).T
        return mid - rad, mid + rad


@dataclass(frozen=True)
class NetworkPolicy:
    net: Mlp
    low: float = -1.0
    high: float = 1.0
    name: str = "network"

    @property
    def action_dim(self) -> int:
        return self.net.out_dim

    @property
    def lipschitz(self) -> float:
        return lipschitz_l1(self.net)

    def __call__(self, x):
        return np.clip(forward(self.net, x), self.low, self.high)

    def interval(self, box_lo, box_hi):
        lo, hi = ibp_forward(self.net, box_lo, box_hi)
        return np.clip(lo, self.low, self.high), np.clip(hi, self.low, self.high)


Policy = Union[AnalyticPolicy, NetworkPolicy]


# -- systems ----------------------------------------------------------------

@dataclass(frozen=True)
class SystemSpec:
    """Closed-loop system description.

    ``dynamics(x, u, w)`` works on batches (leading axes broadcast).  The
    disturbance enters through the fixed linear map ``noise_map`` so that
    ``dynamics(x, u, w) == dynamics(x, u, 0) + w @ noise_map.T``.
    ``displacement_interval(x_lo, x_hi, u_lo, u_hi)`` returns a box enclosing
    ``f(x, u, w) - x`` over the given state/action boxes and the whole
    disturbance support.
    """

    name: str
    state_dim: int
    action_dim: int
    noise_dim: int
    dynamics: Callable
    noise_map: np.ndarray
    displacement_interval: Callable
    lipschitz_f: float
    state_space: Box
    stab_set: Box
    noise: TriangularNoise
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_space.dim != self.state_dim or self.stab_set.dim != self.state_dim:
            raise ConfigError("region dimension does not match state_dim")
        if not self.state_space.contains_box(self.stab_set):
            raise ConfigError("stabilization set must lie inside the state space")
        if np.any(self.stab_set.hi <= self.stab_set.lo):
            raise ConfigError("stabilization set needs a non-empty interior")
        if self.noise.dim != self.noise_dim:
            raise ConfigError("noise dimension does not match noise_dim")

    @property
    def noise_scales(self) -> np.ndarray:
        """Largest per-disturbance-coordinate gain of the physical noise."""
        return np.abs(self.noise_map).max(axis=0) * self.noise.scale

    def dynamics_interval_extension(self, x, u, w_lo, w_hi):
        """Box of ``f(x, u, w)`` for ``w`` in ``[w_lo, w_hi]`` (exact for affine noise).

        ``x``/``u`` may carry leading batch axes that broadcast against the
        noise box arrays.
        """
        base = self.dynamics(x, u, np.zeros(self.noise_dim))
        w_lo = np.asarray(w_lo, dtype=float)
        w_hi = np.asarray(w_hi, dtype=float)
        c = 0.5 * (w_lo + w_hi) @ self.noise_map.T
        r = 0.5 * (w_hi - w_lo) @ np.abs(self.noise_map).T
        lo, hi = base + c - r, base + c + r
        # outward rounding guard
        pad = 1e-12 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        return lo - pad, hi + pad


def _check_dims(spec: SystemSpec, pol, x, w):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != spec.state_dim:
        raise InvalidInput(f"state has dimension {x.shape[-1]}, expected {spec.state_dim}")
    if w.shape[-1] != spec.noise_dim:
        raise InvalidInput(f"noise has dimension {w.shape[-1]}, expected {spec.noise_dim}")
    if pol is not None and pol.action_dim != spec.action_dim:
        raise InvalidInput("policy output dimension does not match action_dim")
    return x, w


def step(spec: SystemSpec, pol, x, w):
    """One closed-loop transition ``f(x, pi(x), w)``; batched over leading axes."""
    x, w = _check_dims(spec, pol, x, w)
    return spec.dynamics(x, pol(x), w)


def closed_loop_interval(spec: SystemSpec, pol, x, w_lo, w_hi):
    x = np.asarray(x, dtype=float)
    return spec.dynamics_interval_extension(x, pol(x), w_lo, w_hi)


# -- benchmarks -------------------------------------------------------------

_2D_A = np.array([[1.0, 0.045], [0.0, 0.9]])
_2D_B = np.array([0.45, 0.5])
_2D_G = np.diag([0.015, 0.005])

PENDULUM_PARAMS = {"dt": 0.05, "G": 10.0, "m": 0.15, "l": 0.5, "b": 0.1}

# Hand-tuned stabilizing gains (u = -gain @ x) used when no policy file is given.
DEFAULT_GAINS = {
    "2d-system": [[0.3, 0.2]],
    "inverted-pendulum": [[0.307, 0.111]],
}


def _linear_2d(x, u, w):
    u = clip_action(np.asarray(u, dtype=float))[..., 0]
    return x @ _2D_A.T + u[..., None] * _2D_B + w @ _2D_G.T


def _interval_mul(a_lo, a_hi, coef):
    """Interval of ``coef * a`` for scalar ``coef``."""
    return np.minimum(coef * a_lo, coef * a_hi), np.maximum(coef * a_lo, coef * a_hi)


def _disp_2d(x_lo, x_hi, u_lo, u_hi):
    # f - x = (A - I) x + B g(u) + G w
    g_lo, g_hi = clip_action(u_lo)[..., 0], clip_action(u_hi)[..., 0]
    M = _2D_A - np.eye(2)
    c = 0.5 * (x_lo + x_hi)
    r = 0.5 * (x_hi - x_lo)
    mid = c @ M.T
    rad = r @ np.abs(M).T
    lo = mid - rad
    hi = mid + rad
    for i in range(2):
        b_lo, b_hi = _interval_mul(g_lo, g_hi, _2D_B[i])
        w_r = np.abs(_2D_G[i]).sum()
        lo[..., i] += b_lo - w_r
        hi[..., i] += b_hi + w_r
    return lo, hi


def _pendulum_consts(p):
    dt, G, m, l = p["dt"], p["G"], p["m"], p["l"]
    # sin(x1 + pi) = -sin(x1)
    return dt * 1.5 * G / (2.0 * l), dt * 3.0 / (m * l * l) * 2.0


def _make_pendulum_dynamics(p):
    grav, torque = _pendulum_consts(p)
    dt, b = p["dt"], p["b"]

    def dynamics(x, u, w):
        u = clip_action(np.asarray(u, dtype=float))[..., 0]
        x1, x2 = x[..., 0], x[..., 1]
        v = (1.0 - b) * x2 + grav * np.sin(x1) + torque * u + 0.002 * w[..., 0]
        a = x1 + dt * v + 0.005 * w[..., 1]
        return np.stack([a, v], axis=-1)

    return dynamics


def _sin_interval(lo, hi):
    """Enclosure of sin over [lo, hi] (elementwise)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    out_lo = np.minimum(s_lo, s_hi)
    out_hi = np.maximum(s_lo, s_hi)
    # any maximum (pi/2 + 2k pi) or minimum (-pi/2 + 2k pi) inside the interval
    k_max = np.ceil((lo - np.pi / 2) / (2 * np.pi))
    has_max = np.pi / 2 + 2 * np.pi * k_max <= hi
    k_min = np.ceil((lo + np.pi / 2) / (2 * np.pi))
    has_min = -np.pi / 2 + 2 * np.pi * k_min <= hi
    out_hi = np.where(has_max, 1.0, out_hi)
    out_lo = np.where(has_min, -1.0, out_lo)
    return out_lo, out_hi


def _make_pendulum_disp(p):
    grav, torque = _pendulum_consts(p)
    dt, b = p["dt"], p["b"]

    def disp(x_lo, x_hi, u_lo, u_hi):
        s_lo, s_hi = _sin_interval(x_lo[..., 0], x_hi[..., 0])
        g_lo, g_hi = clip_action(u_lo)[..., 0], clip_action(u_hi)[..., 0]
        # v' - v = -b v + grav sin(x1) + torque g(u) + 0.002 w1
        dv_lo = -b * x_hi[..., 1] + grav * s_lo + torque * g_lo - 0.002
        dv_hi = -b * x_lo[..., 1] + grav * s_hi + torque * g_hi + 0.002
        # a' - a = dt v' + 0.005 w2, v' = v + (v' - v)
        vn_lo = x_lo[..., 1] + dv_lo
        vn_hi = x_hi[..., 1] + dv_hi
        da_lo = dt * vn_lo - 0.005
        da_hi = dt * vn_hi + 0.005
        return np.stack([da_lo, dv_lo], -1), np.stack([da_hi, dv_hi], -1)

    return disp


def make_benchmark(name: str, policy_gain=None):
    """Return ``(spec, policy)`` for ``"2d-system"`` or ``"inverted-pendulum"``."""
    state_space = Box([-0.5, -0.5], [0.5, 0.5])
    stab_set = Box([-0.2, -0.2], [0.2, 0.2])
    unit = TriangularNoise(np.ones(2))
    if name == "2d-system":
        # joint (x, u, w) l1 norm: max column sum of [A | B | G]
        joint = np.hstack([_2D_A, _2D_B[:, None], _2D_G])
        spec = SystemSpec(
            name=name, state_dim=2, action_dim=1, noise_dim=2,
            dynamics=_linear_2d, noise_map=_2D_G.copy(), displacement_interval=_disp_2d,
            lipschitz_f=float(np.abs(joint).sum(axis=0).max()),
            state_space=state_space, stab_set=stab_set, noise=unit,
            params={"A": _2D_A.tolist(), "B": _2D_B.tolist()},
        )
    elif name == "inverted-pendulum":
        p = dict(PENDULUM_PARAMS)
        grav, torque = _pendulum_consts(p)
        dt, b = p["dt"], p["b"]
        G = np.array([[dt * 0.002, 0.005], [0.002, 0.0]])
        # Jacobian columns with |cos| <= 1: d/dx1, d/dx2, d/du, d/dw1, d/dw2
        cols = [
            (1.0 + dt * grav) + grav,
            dt * (1.0 - b) + (1.0 - b),
            dt * torque + torque,
            dt * 0.002 + 0.002,
            0.005,
        ]
        spec = SystemSpec(
            name=name, state_dim=2, action_dim=1, noise_dim=2,
            dynamics=_make_pendulum_dynamics(p), noise_map=G,
            displacement_interval=_make_pendulum_disp(p),
            lipschitz_f=float(max(cols)),
            state_space=state_space, stab_set=stab_set, noise=unit, params=p,
        )
    else:
        raise ConfigError(f"unknown benchmark {name!r}")
    gain = DEFAULT_GAINS[name] if policy_gain is None else policy_gain
    return spec, AnalyticPolicy(np.asarray(gain, dtype=float))


def pure_noise_system(scales, state_dim=None) -> SystemSpec:
    """``x' = x + diag(scales) w``; a reference system with closed-form displacement."""
    s = np.asarray(scales, dtype=float)
    n = s.size
    G = np.diag(s)

    def dynamics(x, u, w):
        return x + w @ G.T

    def disp(x_lo, x_hi, u_lo, u_hi):
        shape = np.broadcast_shapes(np.shape(x_lo))
        return np.broadcast_to(-np.abs(s), shape).copy(), np.broadcast_to(np.abs(s), shape).copy()

    big = Box(-np.ones(n), np.ones(n))
    return SystemSpec(
        name="pure-noise", state_dim=n, action_dim=1, noise_dim=n,
        dynamics=dynamics, noise_map=G, displacement_interval=disp,
        lipschitz_f=float(max(1.0, np.abs(s).max())),
        state_space=big, stab_set=Box(-0.5 * np.ones(n), 0.5 * np.ones(n)),
        noise=TriangularNoise(np.ones(n)),
    )
