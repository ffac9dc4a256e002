"""Stabilization-time bounds from a certificate, and rollouts to compare against.

All bounds use ``V' = V + m``, the function the certificate proves to be a
ranking supermartingale with margin ``eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .errors import InvalidInput
from .system import Box, SystemSpec, sample_noise, step
from .verifier import Certificate

HORIZON_CAP = 10 ** 6


@dataclass
class TimeBounds:
    expected_bound: float
    markov_tail: Dict[int, float] = field(default_factory=dict)
    azuma_tail: Dict[int, float] = field(default_factory=dict)
    c: Optional[float] = None


@dataclass
class TrajectoryStats:
    """Hitting times per run (``inf`` when the horizon was reached first)."""

    times: np.ndarray
    horizon: int
    runs: int
    seed: int

    @property
    def finished(self) -> np.ndarray:
        return np.isfinite(self.times)

    def survival(self, t) -> np.ndarray:
        """Empirical ``P[T >= t]`` for each entry of ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (self.times[None, :] >= t[:, None]).mean(axis=1)


def _vprime(cert: Certificate, x0) -> float:
    return float(cert.value(np.asarray(x0, dtype=float)[None])[0])


def expected_time_bound(cert: Certificate, x0) -> float:
    return _vprime(cert, x0) / cert.eps


def markov_tail_bound(cert: Certificate, x0, t: int) -> float:
    """``min(1, V'(x0) / (eps t))``."""
    if t < 1:
        raise InvalidInput("t must be at least 1")
    return min(1.0, _vprime(cert, x0) / (cert.eps * t))


def azuma_log_tail(eps: float, v0: float, t: float, c: float) -> float:
    """Natural log of the unclamped Azuma-type tail bound."""
    s = (c + eps) ** 2
    return eps * v0 / s - t * eps * eps / (2.0 * s)


def azuma_tail_bound(cert: Certificate, x0, t: int, c: float) -> float:
    """``min(1, A exp(-t eps^2 / (2 (c + eps)^2)))`` with ``A = exp(eps V'(x0) / (c + eps)^2)``."""
    if t < 1:
        raise InvalidInput("t must be at least 1")
    if not c > 0:
        raise InvalidInput("bounded-difference constant c must be positive")
    return math.exp(min(0.0, azuma_log_tail(cert.eps, _vprime(cert, x0), t, c)))


def time_bounds(cert: Certificate, x0, ts: Sequence[int], c: Optional[float] = None) -> TimeBounds:
    tb = TimeBounds(expected_time_bound(cert, x0), c=c)
    for t in ts:
        tb.markov_tail[int(t)] = markov_tail_bound(cert, x0, int(t))
        if c is not None and c > 0:
            tb.azuma_tail[int(t)] = azuma_tail_bound(cert, x0, int(t), c)
    return tb


def bounded_difference_c(spec: SystemSpec, pol, cell: float = 0.05, region: Optional[Box] = None) -> float:
    """Sound bound on ``||f(x, pi(x), w) - x||_1`` over the state space and noise support.

    The region is covered by boxes of width at most ``cell``; on each box the
    policy range and the displacement enclosure are computed by interval
    arithmetic and the largest l1 norm of the enclosure is taken.
    """
    if not cell > 0:
        raise InvalidInput("cell width must be positive")
    X = spec.state_space if region is None else region
    edges = [np.linspace(lo, hi, max(1, int(np.ceil((hi - lo) / cell - 1e-9))) + 1) for lo, hi in zip(X.lo, X.hi)]
    mesh = np.meshgrid(*[np.arange(len(e) - 1) for e in edges], indexing="ij")
    idx = np.stack([m.reshape(-1) for m in mesh], axis=1)
    lo = np.stack([edges[a][idx[:, a]] for a in range(X.dim)], axis=1)
    hi = np.stack([edges[a][idx[:, a] + 1] for a in range(X.dim)], axis=1)
    u_lo, u_hi = pol.interval(lo, hi)
    d_lo, d_hi = spec.displacement_interval(lo, hi, u_lo, u_hi)
    return float(np.maximum(np.abs(d_lo), np.abs(d_hi)).sum(axis=1).max())


def horizon_for(cert: Certificate, x0, miss: float = 1e-3, cap: int = HORIZON_CAP) -> int:
    """Steps after which the Markov tail bound drops to ``miss``."""
    h = math.ceil(_vprime(cert, x0) / (cert.eps * miss))
    return int(min(max(h, 1), cap))


def simulate_hitting_times(spec: SystemSpec, pol, x0, runs: int, horizon: int, seed: int) -> TrajectoryStats:
    """First entry time into the stabilization set for ``runs`` independent rollouts."""
    if runs < 1 or horizon < 1:
        raise InvalidInput("runs and horizon must be at least 1")
    g = rngmod.stream(seed, "rollout")
    x = np.tile(np.asarray(x0, dtype=float), (runs, 1))
    times = np.full(runs, np.inf)
    active = np.ones(runs, dtype=bool)
    inside = spec.stab_set.contains(x)
    times[inside] = 0
    active &= ~inside
    for t in range(1, horizon + 1):
        if not active.any():
            break
        ids = np.flatnonzero(active)
        w = sample_noise(spec.noise, g, len(ids))
        x[ids] = step(spec, pol, x[ids], w)
        hit = spec.stab_set.contains(x[ids])
        times[ids[hit]] = t
        active[ids[hit]] = False
    return TrajectoryStats(times, int(horizon), int(runs), int(seed))


def rollout(spec: SystemSpec, pol, x0, steps: int, seed: int, noise: bool = True) -> np.ndarray:
    """One trajectory of ``steps`` transitions, shape ``(steps + 1, d)``."""
    g = rngmod.as_generator(seed, "trajectory")
    out = np.empty((steps + 1, spec.state_dim))
    out[0] = x0
    for t in range(steps):
        w = sample_noise(spec.noise, g) if noise else np.zeros(spec.noise_dim)
        out[t + 1] = step(spec, pol, out[t], w)
    return out


def contour_export(cert: Certificate, resolution: int, region: Box) -> np.ndarray:
    """Rows ``(x1, x2, V'(x) / eps)`` over a ``resolution x resolution`` raster of ``region``."""
    if resolution < 2:
        raise InvalidInput("resolution must be at least 2 per axis")
    if region.dim != 2:
        raise InvalidInput("contour raster needs a two-dimensional state space")
    a = np.linspace(region.lo[0], region.hi[0], resolution)
    b = np.linspace(region.lo[1], region.hi[1], resolution)
    xx, yy = np.meshgrid(a, b, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    return np.column_stack([pts, cert.value(pts) / cert.eps])
