"""Reference systems and instances shared by the unit and acceptance tests."""
import numpy as np

from rsmcert.learner import LearnerConfig, build_grid, init_samples, lipschitz_threshold, loss, loss_terms
from rsmcert.nn import Mlp, init_mlp, lipschitz_l1
from rsmcert.system import AnalyticPolicy, Box, SystemSpec, TriangularNoise, make_benchmark


def linear_1d(a=0.5, s=0.1, offset=0.0, X=(-1.0, 1.0), Xs=(-0.2, 0.2)):
    """``x' = a x + offset + s w`` on a 1D box; the policy is ignored."""
    G = np.array([[s]])

    def dynamics(x, u, w):
        return a * x + offset + w @ G.T

    def disp(x_lo, x_hi, u_lo, u_hi):
        c1, c2 = (a - 1.0) * x_lo + offset, (a - 1.0) * x_hi + offset
        return np.minimum(c1, c2) - abs(s), np.maximum(c1, c2) + abs(s)

    spec = SystemSpec(
        name="linear-1d", state_dim=1, action_dim=1, noise_dim=1,
        dynamics=dynamics, noise_map=G, displacement_interval=disp,
        lipschitz_f=max(abs(a), abs(s)),
        state_space=Box([X[0]], [X[1]]), stab_set=Box([Xs[0]], [Xs[1]]),
        noise=TriangularNoise([1.0]),
    )
    return spec, AnalyticPolicy([[0.0]])


def abs_net(scale=1.0, bias=0.0):
    """``V(x) = scale |x| + bias`` as a one-hidden-layer ReLU network."""
    return Mlp([np.array([[1.0], [-1.0]]), np.array([[scale, scale]])], [np.zeros(2), np.array([bias])])


def flat_params(params):
    return np.concatenate([p.ravel() for p in params])


def fd_instance(seed):
    """Random loss instance and its central differences, or None when a kink lies within h.

    The loss is piecewise smooth (hinge, ReLU, max column sum), so the
    comparison is only meaningful away from the kinks; one-sided differences
    that disagree flag one.
    """
    g = np.random.default_rng(seed)
    spec, pol = make_benchmark("inverted-pendulum" if seed % 2 else "2d-system")
    grid = build_grid(spec, 0.1)
    store = init_samples(spec, pol, grid, 3, seed)
    V = init_mlp([2, 6, 1], g)
    for b in V.biases:
        b[:] = g.normal(0, 0.2, b.shape)
    cfg = LearnerConfig(lam=0.5, delta=0.01, tau=1.0)
    idx = np.sort(g.choice(len(store.points), 40, replace=False))
    ktau = float(g.uniform(0, 0.2))

    def f():
        return loss_terms(V, store, ktau, cfg, 1.0, 0.5, idx=idx)[0]

    f0 = f()
    _, _, _, grads = loss_terms(V, store, ktau, cfg, 1.0, 0.5, idx=idx, with_grad=True)
    fd, h = [], 1e-4
    for p in V.params():
        for j in np.ndindex(p.shape):
            old = p[j]
            p[j] = old + h
            up = f()
            p[j] = old - h
            dn = f()
            p[j] = old
            if abs((up - f0) - (f0 - dn)) > 1e-7 * max(1.0, abs(up - dn)):
                return None
            fd.append((up - dn) / (2 * h))
    return flat_params(grads), np.array(fd)


def theorem4_losses(seed=0):
    # x' = 0.5 x + 0.1 w and V = |x|: E V(x') = 0.5 |x| for |x| >= 0.2, so the
    # expected decrease is at least 0.1 > ktau; L_V = 2 is under the threshold.
    spec, pol = linear_1d(a=0.5, s=0.1)
    grid = build_grid(spec, 0.01)
    V = abs_net()
    cfg = LearnerConfig(lam=0.0005, tau=0.1)
    lf, lpi = 0.5, 0.0
    assert lipschitz_l1(V) < lipschitz_threshold(cfg, lf, lpi)
    out = {}
    for n in (10, 100, 1000, 10000):
        store = init_samples(spec, pol, grid, n, seed)
        out[n] = loss(V, grid, store, 0.095, cfg, lf, lpi)
    return out
