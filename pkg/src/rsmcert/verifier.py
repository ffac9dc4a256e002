"""Grid verification of the expected-decrease condition and the learner-verifier loop.

A candidate ``V`` passes at grid point ``x`` with mesh ``t`` when the sound
expectation bound satisfies ``E[V(x')] < V(x) - t K - slack``.  If that holds
everywhere, ``V + m`` is a ranking supermartingale with margin ``eps``, where
``m`` lifts the IBP lower bound of ``V`` over the state space to zero and
``eps`` is the smallest grid slack.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ContractError, InvalidInput, ResourceError
from .expectation import NoisePartition, build_partition, expected_upper_bound
from .learner import (
    GRID_CAP, Discretization, LearnerConfig, add_counterexamples, build_grid, init_samples,
    train_candidate,
)
from .nn import Mlp, forward, ibp_forward, init_mlp, lipschitz_l1
from .system import Box, SystemSpec

log = logging.getLogger("rsmcert")

SLACK = 1e-9
CEX_CAP = 10 ** 4
MODES = ("scheduled", "on-demand", "both")


def compute_K(l_v: float, l_f: float, l_pi: float) -> float:
    """Lipschitz slack constant ``L_V (L_f (L_pi + 1) + 1)``."""
    if min(l_v, l_f, l_pi) < 0:
        raise InvalidInput("Lipschitz constants must be nonnegative")
    return l_v * (l_f * (l_pi + 1.0) + 1.0)


@dataclass
class Certificate:
    network: Mlp
    m: float
    eps: float
    K: float
    tau: float
    L_V: float
    L_f: float
    L_pi: float
    benchmark: str = ""
    seed: int = 0
    k: int = 16
    grid_size: int = 0
    min_mesh: float = 0.0
    refined_points: int = 0
    iterations: int = 0
    slack: float = SLACK
    wall_time: float = 0.0

    def value(self, x) -> np.ndarray:
        """``V'(x) = V(x) + m`` (batched)."""
        return forward(self.network, x)[..., 0] + self.m


@dataclass
class VerdictReport:
    """Outcome of one grid check or of a whole :func:`certify` run.

    ``outcome`` is ``"verified"``, ``"counterexamples"`` or ``"timeout"``.
    For counterexamples, ``margins[i] = bound - (V(x) - t K - slack) >= 0`` at
    ``cex[i]``, sorted worst first.  ``slack`` holds ``V(x) - t K - bound``
    at every grid point, ``weak_ok`` whether ``bound < V(x)`` held everywhere.
    """

    outcome: str
    certificate: Optional[Certificate] = None
    cex: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cex_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    slack: Optional[np.ndarray] = None
    weak_ok: bool = False
    tau: float = 0.0
    iterations: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return self.outcome == "verified"

    @property
    def n_violations(self) -> int:
        return len(self.margins)

    @property
    def min_slack(self) -> float:
        return float(self.slack.min()) if self.slack is not None and self.slack.size else float("inf")


def check_grid(V: Mlp, spec: SystemSpec, pol, grid: Discretization, part: NoisePartition, K: float,
               slack: float = SLACK) -> VerdictReport:
    """Check the discrete decrease condition at every grid point (per-point mesh)."""
    if len(grid) == 0:
        return VerdictReport("verified", slack=np.zeros(0), weak_ok=True, tau=grid.tau)
    vx = forward(V, grid.points)[:, 0]
    bound = expected_upper_bound(V, spec, pol, grid.points, part)
    gap = vx - grid.mesh * K - bound
    bad = np.flatnonzero(~(gap > slack))
    order = bad[np.argsort(gap[bad], kind="stable")]
    weak_ok = bool(np.all(bound < vx - slack))
    outcome = "counterexamples" if len(order) else "verified"
    return VerdictReport(
        outcome, cex=grid.points[order], margins=slack - gap[order], cex_index=order,
        slack=gap, weak_ok=weak_ok, tau=grid.tau,
    )


def global_lower_bound(V: Mlp, X: Box) -> float:
    """IBP lower bound of ``V`` over the box ``X``."""
    lo, _ = ibp_forward(V, X.lo[None], X.hi[None])
    return float(lo[0, 0])


def compute_epsilon(V: Mlp, spec: SystemSpec, pol, grid: Discretization, part: NoisePartition, K: float,
                    slack: float = SLACK) -> float:
    """Smallest grid slack ``V(x) - t K - bound``; requires a passing grid."""
    rep = check_grid(V, spec, pol, grid, part, K, slack)
    if not rep.verified:
        raise ContractError(f"grid check failed at {rep.n_violations} points; no margin to report")
    return rep.min_slack


# -- refinement -------------------------------------------------------------

def subdivide(spec: SystemSpec, grid: Discretization, idx, factor: float = 0.1) -> Discretization:
    """Split the cells of points ``idx`` into subcells of mesh ``factor * tau``.

    Subcells lying inside the (closed) stabilization set are dropped.  Each
    subcell is represented by its center with its own l1 radius as mesh.
    """
    idx = np.asarray(idx, dtype=int)
    d = spec.state_dim
    step = 2.0 * factor * grid.tau / d
    los, his = [], []
    S = spec.stab_set
    for i in idx:
        lo, hi = grid.cell_lo[i], grid.cell_hi[i]
        axes = []
        for a in range(d):
            n = max(1, int(np.ceil((hi[a] - lo[a]) / step - 1e-9)))
            axes.append(np.linspace(lo[a], hi[a], n + 1))
        mesh = np.meshgrid(*[np.arange(len(e) - 1) for e in axes], indexing="ij")
        sub = np.stack([m.reshape(-1) for m in mesh], axis=1)
        clo = np.stack([axes[a][sub[:, a]] for a in range(d)], axis=1)
        chi = np.stack([axes[a][sub[:, a] + 1] for a in range(d)], axis=1)
        keep = ~(np.all(clo >= S.lo, axis=1) & np.all(chi <= S.hi, axis=1))
        los.append(clo[keep])
        his.append(chi[keep])
    if not los:
        z = np.zeros((0, d))
        return Discretization(z, z, z, np.zeros(0), factor * grid.tau)
    clo, chi = np.concatenate(los), np.concatenate(his)
    centers = 0.5 * (clo + chi)
    radius = 0.5 * (chi - clo).sum(axis=1)
    return Discretization(centers, clo, chi, radius, factor * grid.tau)


def merge(grid: Discretization, drop, extra: Discretization) -> Discretization:
    """``grid`` without the points ``drop`` plus all points of ``extra``; keeps ``grid.tau``."""
    keep = np.ones(len(grid), dtype=bool)
    keep[np.asarray(drop, dtype=int)] = False
    return Discretization(
        np.concatenate([grid.points[keep], extra.points]),
        np.concatenate([grid.cell_lo[keep], extra.cell_lo]),
        np.concatenate([grid.cell_hi[keep], extra.cell_hi]),
        np.concatenate([grid.mesh[keep], extra.mesh]),
        grid.tau,
    )


def refine(spec: SystemSpec, grid: Discretization, violations, mode: str, cap: int = GRID_CAP,
           schedule_factor: float = 0.2, cell_factor: float = 0.1) -> Discretization:
    """Scheduled: a fresh grid at ``0.2 tau``.  On-demand: violating cells split at ``0.1 tau``."""
    if mode == "scheduled":
        return build_grid(spec, schedule_factor * grid.tau, cap)
    if mode == "on-demand":
        violations = np.asarray(violations, dtype=int)
        if len(violations) == 0:
            return grid
        sub = subdivide(spec, grid, violations, cell_factor)
        if len(grid) - len(violations) + len(sub) > cap:
            raise ResourceError("refined grid exceeds the size cap")
        return merge(grid, violations, sub)
    raise ConfigError(f"unknown refinement mode {mode!r}")


def check_refined(V: Mlp, spec: SystemSpec, pol, sub: Discretization, part: NoisePartition, K: float,
                  slack: float = SLACK, block: int = 16384) -> VerdictReport:
    """:func:`check_grid` over refined cells, stopping at the first failing block.

    On-demand refinement is abandoned as soon as one refined cell fails, so
    the remaining cells need not be checked.
    """
    gaps = []
    for s in range(0, len(sub), block):
        piece = Discretization(sub.points[s:s + block], sub.cell_lo[s:s + block], sub.cell_hi[s:s + block],
                               sub.mesh[s:s + block], sub.tau)
        rep = check_grid(V, spec, pol, piece, part, K, slack)
        gaps.append(rep.slack)
        if not rep.verified:
            rep.cex_index = rep.cex_index + s
            rep.slack = np.concatenate(gaps)
            return rep
    return VerdictReport("verified", slack=np.concatenate(gaps) if gaps else np.zeros(0), weak_ok=True,
                         tau=sub.tau)


# -- learner-verifier loop --------------------------------------------------

@dataclass
class CertifyConfig:
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    verifier_tau: float = 0.01
    k: int = 16
    refinement: str = "both"
    slack: float = SLACK
    hidden: tuple = (128,)
    max_iterations: Optional[int] = None
    cex_cap: int = CEX_CAP
    schedule_every: int = 4
    schedule_factor: float = 0.2
    cell_factor: float = 0.1
    grid_cap: int = GRID_CAP

    def __post_init__(self):
        if self.refinement not in MODES:
            raise ConfigError(f"refinement must be one of {MODES}, got {self.refinement!r}")
        if not self.verifier_tau > 0:
            raise ConfigError("verifier_tau must be positive")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")


class _Clock:
    def __init__(self, timeout):
        self.start = time.monotonic()
        self.deadline = None if timeout is None else self.start + float(timeout)

    def expired(self) -> bool:
        return self.deadline is not None and time.monotonic() >= self.deadline

    def elapsed(self) -> float:
        return time.monotonic() - self.start


def _emit(sink, history, **rec):
    history.append(rec)
    log.info(" ".join(f"{k}={v}" for k, v in rec.items()))
    if sink is not None:
        sink(rec)


def certify(spec: SystemSpec, pol, cfg: CertifyConfig, timeout: Optional[float], seed: int,
            init: Optional[Mlp] = None, sink: Optional[Callable[[dict], None]] = None) -> VerdictReport:
    """Alternate training and grid checks until a certificate, the iteration cap or the timeout.

    ``sink`` receives one record per iteration (iteration, tau, violations,
    min margin, ...).  Returns a verified report with a certificate, the last
    counterexample report when ``max_iterations`` is exhausted, or a timeout
    report.
    """
    clock = _Clock(timeout)
    history: List[dict] = []
    if timeout is not None and timeout <= 0:
        return VerdictReport("timeout", history=history)
    l_f, l_pi = spec.lipschitz_f, pol.lipschitz
    part = build_partition(spec.noise, cfg.k)
    grid = build_grid(spec, cfg.verifier_tau, cfg.grid_cap)
    store = init_samples(spec, pol, grid, cfg.learner.n_samples, rngmod.stream(seed, "init-samples"))
    V = init if init is not None else init_mlp(
        [spec.state_dim, *cfg.hidden, 1], rngmod.stream(seed, "init-net"))
    schedule = cfg.refinement in ("scheduled", "both")
    on_demand = cfg.refinement in ("on-demand", "both")
    failed = 0
    it = 0
    rep = VerdictReport("timeout", history=history)
    while True:
        if clock.expired():
            return VerdictReport("timeout", tau=grid.tau, iterations=it, history=history)
        it += 1
        ktau = cfg.learner.tau * compute_K(lipschitz_l1(V), l_f, l_pi)
        V = train_candidate(V, grid, store, ktau, cfg.learner, rngmod.stream(seed, "train", it), l_f, l_pi)
        if clock.expired():
            return VerdictReport("timeout", tau=grid.tau, iterations=it, history=history)
        l_v = lipschitz_l1(V)
        K = compute_K(l_v, l_f, l_pi)
        rep = check_grid(V, spec, pol, grid, part, K, cfg.slack)
        final, refined = grid, 0
        if not rep.verified and on_demand and rep.weak_ok:
            sub = subdivide(spec, grid, rep.cex_index, cfg.cell_factor)
            if len(grid) - rep.n_violations + len(sub) > cfg.grid_cap:
                raise ResourceError("on-demand refinement exceeds the grid size cap")
            sub_rep = check_refined(V, spec, pol, sub, part, K, cfg.slack)
            _emit(sink, history, iteration=it, phase="on-demand", tau=grid.tau, cells=rep.n_violations,
                  subcells=len(sub), violations=sub_rep.n_violations, min_margin=sub_rep.min_slack)
            if sub_rep.verified:
                keep = np.ones(len(grid), dtype=bool)
                keep[rep.cex_index] = False
                gaps = np.concatenate([rep.slack[keep], sub_rep.slack])
                final = merge(grid, rep.cex_index, sub)
                refined = len(sub)
                rep = VerdictReport("verified", slack=gaps, weak_ok=True, tau=grid.tau)
        _emit(sink, history, iteration=it, phase="check", tau=grid.tau, points=len(grid),
              violations=rep.n_violations, min_margin=rep.min_slack, L_V=l_v, K=K,
              weak_ok=rep.weak_ok, elapsed=round(clock.elapsed(), 3))
        if rep.verified:
            m = max(0.0, -global_lower_bound(V, spec.state_space))
            cert = Certificate(
                network=V, m=m, eps=rep.min_slack, K=K, tau=grid.tau, L_V=l_v, L_f=l_f, L_pi=l_pi,
                benchmark=spec.name, seed=seed, k=cfg.k, grid_size=len(final),
                min_mesh=float(final.mesh.min()) if len(final) else grid.tau, refined_points=refined,
                iterations=it, slack=cfg.slack, wall_time=clock.elapsed(),
            )
            rep.certificate = cert
            rep.iterations = it
            rep.history = history
            return rep
        failed += 1
        if cfg.max_iterations is not None and it >= cfg.max_iterations:
            rep.iterations = it
            rep.history = history
            return rep
        worst = rep.cex[:cfg.cex_cap]
        store = add_counterexamples(store, spec, pol, worst, cfg.learner.n_samples,
                                    rngmod.stream(seed, "counterexamples", it), grid=grid)
        if schedule and failed % cfg.schedule_every == 0:
            grid = refine(spec, grid, None, "scheduled", cfg.grid_cap, cfg.schedule_factor)
            _emit(sink, history, iteration=it, phase="scheduled", tau=grid.tau, points=len(grid))
