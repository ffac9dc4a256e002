"""Grid discretization, successor-sample store and the RSM training loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import InvalidInput, ResourceError, TrainingDiverged
from .nn import Adam, Mlp, backward, forward_cache, lipschitz_l1, lipschitz_l1_grad
from .system import SystemSpec, sample_noise, step

GRID_CAP = 10 ** 8


@dataclass
class Discretization:
    """Finite set of states covering ``X \\ X_s``.

    ``cell_lo``/``cell_hi`` give the axis-aligned cell each point stands for;
    ``mesh[i]`` is the l1 radius used for point ``i`` in the decrease check
    (``tau`` for base points, smaller for on-demand refined ones).
    """

    points: np.ndarray
    cell_lo: np.ndarray
    cell_hi: np.ndarray
    mesh: np.ndarray
    tau: float

    def __len__(self):
        return len(self.points)


def axis_lines(lo, hi, breaks, spacing):
    """Grid coordinates on ``[lo, hi]`` with every value in ``breaks`` a line and gaps <= spacing."""
    knots = sorted({float(lo), float(hi), *[float(b) for b in breaks if lo < b < hi]})
    parts = []
    for a, b in zip(knots[:-1], knots[1:]):
        n = max(1, int(np.ceil((b - a) / spacing - 1e-9)))
        parts.append(np.linspace(a, b, n + 1)[:-1])
    parts.append(np.array([knots[-1]]))
    return np.concatenate(parts)


def _lines_to_cells(lines):
    mids = 0.5 * (lines[1:] + lines[:-1])
    return np.concatenate([[lines[0]], mids]), np.concatenate([mids, [lines[-1]]])


def build_grid(spec: SystemSpec, tau: float, cap: int = GRID_CAP) -> Discretization:
    """Uniform axis grid over the state box minus the interior of ``X_s``.

    Axis spacing is at most ``2 tau / d`` and the boundary of ``X_s`` lies on
    grid lines, so every state outside the interior of ``X_s`` is within l1
    distance ``tau`` of a returned point.
    """
    if not tau > 0:
        raise InvalidInput("mesh must be positive")
    d = spec.state_dim
    sp = 2.0 * tau / d
    X, S = spec.state_space, spec.stab_set
    lines = [axis_lines(X.lo[i], X.hi[i], (S.lo[i], S.hi[i]), sp) for i in range(d)]
    total = int(np.prod([len(l) for l in lines], dtype=float))
    if total > cap:
        raise ResourceError(f"grid with mesh {tau} has {total} points, cap is {cap}")
    cells = [_lines_to_cells(l) for l in lines]
    mesh_idx = np.meshgrid(*[np.arange(len(l)) for l in lines], indexing="ij")
    idx = np.stack([m.reshape(-1) for m in mesh_idx], axis=1)
    pts = np.stack([lines[i][idx[:, i]] for i in range(d)], axis=1)
    keep = ~S.contains(pts, strict=True)
    idx, pts = idx[keep], pts[keep]
    clo = np.stack([cells[i][0][idx[:, i]] for i in range(d)], axis=1)
    chi = np.stack([cells[i][1][idx[:, i]] for i in range(d)], axis=1)
    return Discretization(pts, clo, chi, np.full(len(pts), float(tau)), float(tau))


def grid_point_count(spec: SystemSpec, tau: float) -> int:
    """Closed-form size of :func:`build_grid` (lines per axis, minus the hole)."""
    d = spec.state_dim
    sp = 2.0 * tau / d
    X, S = spec.state_space, spec.stab_set
    total, hole = 1, 1
    for i in range(d):
        segs = [S.lo[i] - X.lo[i], S.hi[i] - S.lo[i], X.hi[i] - S.hi[i]]
        n = [max(1, int(np.ceil(s / sp - 1e-9))) for s in segs]
        total *= sum(n) + 1
        hole *= n[1] - 1
    return total - hole


# -- successor samples ------------------------------------------------------

@dataclass
class SampleStore:
    """Successor samples ``D_x`` for every grid point, stored flat with an owner index."""

    points: np.ndarray
    succ: np.ndarray
    owner: np.ndarray
    _order: Optional[np.ndarray] = field(default=None, repr=False)

    def counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=len(self.points))

    def samples_of(self, i: int) -> np.ndarray:
        return self.succ[self.owner == i]

    def csr(self):
        if self._order is None:
            self._order = np.argsort(self.owner, kind="stable")
        counts = self.counts()
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return self._order, starts, counts


def _successors(spec, pol, x, n, g):
    w = sample_noise(spec.noise, g, len(x) * n).reshape(len(x), n, spec.noise_dim)
    nxt = step(spec, pol, np.repeat(x[:, None, :], n, axis=1), w)
    return nxt.reshape(-1, spec.state_dim)


def init_samples(spec: SystemSpec, pol, grid: Discretization, n: int, seed) -> SampleStore:
    if n < 1:
        raise InvalidInput("N must be at least 1")
    g = rngmod.as_generator(seed, "init-samples")
    succ = _successors(spec, pol, grid.points, n, g)
    owner = np.repeat(np.arange(len(grid.points)), n)
    return SampleStore(grid.points, succ, owner)


def add_counterexamples(store: SampleStore, spec: SystemSpec, pol, cex, n: int, seed,
                        grid: Optional[Discretization] = None) -> SampleStore:
    """Append ``n`` fresh successors for every counterexample state.

    Counterexamples must be points of the store, or of ``grid`` when given
    (after a refinement the verifier grid has points the store lacks; those
    are added as new training points).
    """
    cex = np.asarray(cex, dtype=float).reshape(-1, spec.state_dim)
    if len(cex) == 0:
        return store
    index = {tuple(p): i for i, p in enumerate(store.points)}
    allowed = None if grid is None else {tuple(p) for p in grid.points}
    new_pts, ids = [], []
    for c in cex:
        key = tuple(c)
        if key not in index:
            if allowed is None or key not in allowed:
                raise InvalidInput(f"counterexample {key} is not a grid point")
            index[key] = len(store.points) + len(new_pts)
            new_pts.append(c)
        ids.append(index[key])
    ids = np.asarray(ids, dtype=int)
    points = np.concatenate([store.points, np.reshape(new_pts, (-1, spec.state_dim))]) if new_pts else store.points
    g = rngmod.as_generator(seed, "counterexamples")
    succ = _successors(spec, pol, points[ids], n, g)
    return SampleStore(
        points,
        np.concatenate([store.succ, succ]),
        np.concatenate([store.owner, np.repeat(ids, n)]),
    )


# -- loss -------------------------------------------------------------------

@dataclass
class LearnerConfig:
    lam: float = 0.0005
    delta: float = 4.0
    learning_rate: float = 1e-4
    n_samples: int = 20
    epochs: int = 2000
    tau: float = 0.1
    batch_size: Optional[int] = None

    def __post_init__(self):
        for k in ("delta", "learning_rate", "tau"):
            if not getattr(self, k) > 0:
                raise InvalidInput(f"{k} must be positive")
        if self.lam < 0:
            raise InvalidInput("lam must be nonnegative")
        if self.n_samples < 1 or self.epochs < 0:
            raise InvalidInput("n_samples >= 1 and epochs >= 0 required")


def lipschitz_threshold(cfg: LearnerConfig, lf: float, lpi: float) -> float:
    return cfg.delta / (cfg.tau * (lf * (lpi + 1.0) + 1.0))


def _select(store: SampleStore, idx):
    order, starts, counts = store.csr()
    c = counts[idx]
    rows = np.concatenate([order[s:s + k] for s, k in zip(starts[idx], c)]) if len(idx) else np.zeros(0, int)
    seg = np.repeat(np.arange(len(idx)), c)
    return rows, seg, c


def loss_terms(V: Mlp, store: SampleStore, ktau: float, cfg: LearnerConfig, lf: float, lpi: float,
               idx=None, with_grad=False):
    """Return ``(loss, l_rsm, l_lip[, grads])`` on the points ``idx`` (all by default).

    ``l_rsm`` averages ``max(mean V(D_x) - V(x) + ktau, 0)`` and ``l_lip`` is
    ``max(L_V - threshold, 0)``; ``loss = l_rsm + lam * l_lip``.
    """
    if idx is None:
        idx = np.arange(len(store.points))
    rows, seg, c = _select(store, idx)
    if np.any(c == 0):
        raise InvalidInput("sample store does not cover every grid point")
    xs = store.points[idx]
    vx, cache_x = forward_cache(V, xs)
    vn, cache_n = forward_cache(V, store.succ[rows])
    mean_next = np.bincount(seg, weights=vn[:, 0], minlength=len(idx)) / c
    viol = mean_next - vx[:, 0] + ktau
    active = viol > 0.0
    l_rsm = float(np.where(active, viol, 0.0).mean())
    lv = lipschitz_l1(V)
    thr = lipschitz_threshold(cfg, lf, lpi)
    l_lip = max(lv - thr, 0.0)
    loss = l_rsm + cfg.lam * l_lip
    if not with_grad:
        return loss, l_rsm, l_lip
    w = active / len(idx)
    gx, _ = backward(V, cache_x, -w[:, None])
    gn, _ = backward(V, cache_n, (w[seg] / c[seg])[:, None])
    grads = [a + b for a, b in zip(gx, gn)]
    if l_lip > 0.0 and cfg.lam > 0.0:
        grads = [g + cfg.lam * h for g, h in zip(grads, lipschitz_l1_grad(V))]
    return loss, l_rsm, l_lip, grads


def loss(V: Mlp, grid: Discretization, store: SampleStore, ktau: float, cfg: LearnerConfig,
         lf: float = 0.0, lpi: float = 0.0) -> float:
    return loss_terms(V, store, ktau, cfg, lf, lpi)[0]


def train_candidate(V: Mlp, grid: Discretization, store: SampleStore, ktau: float, cfg: LearnerConfig,
                    seed, lf: float = 0.0, lpi: float = 0.0, history=None) -> Mlp:
    """Adam on the loss for ``cfg.epochs`` steps; returns a new network."""
    net = V.copy()
    opt = Adam(cfg.learning_rate)
    g = rngmod.as_generator(seed, "train")
    n = len(store.points)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    perm, pos = g.permutation(n), 0
    params = net.params()
    for _ in range(cfg.epochs):
        if bs == n:
            idx = None
        else:
            if pos + bs > n:
                perm, pos = g.permutation(n), 0
            idx = np.sort(perm[pos:pos + bs])
            pos += bs
        val, _, _, grads = loss_terms(net, store, ktau, cfg, lf, lpi, idx=idx, with_grad=True)
        if not np.isfinite(val) or not all(np.all(np.isfinite(gr)) for gr in grads):
            raise TrainingDiverged(f"non-finite loss {val}")
        if history is not None:
            history.append(val)
        opt.step(params, grads)
    return net
