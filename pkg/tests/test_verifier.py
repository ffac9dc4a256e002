import numpy as np
import pytest

from helpers import abs_net, linear_1d
from rsmcert.errors import ConfigError, ContractError, InvalidInput
from rsmcert.expectation import build_partition, mc_expectation
from rsmcert.learner import Discretization, LearnerConfig, build_grid
from rsmcert.nn import Mlp, constant_mlp, forward, init_mlp
from rsmcert.system import make_benchmark
from rsmcert.verifier import (
    CertifyConfig, certify, check_grid, compute_epsilon, compute_K, global_lower_bound, refine, subdivide,
)


def test_compute_K_examples():
    assert compute_K(1, 1, 1) == 3
    assert compute_K(4, 1.2, 2) == pytest.approx(18.4)
    assert compute_K(0, 8.4, 0.4) == 0
    with pytest.raises(InvalidInput):
        compute_K(-1, 1, 1)


def shift_system(offset):
    """Deterministic ``x' = x + offset`` with the identity network as ``V``."""
    spec, pol = linear_1d(a=1.0, s=0.0, offset=offset, X=(-10.0, 10.0), Xs=(-1.0, 1.0))
    V = Mlp([np.array([[1.0]])], [np.zeros(1)])
    grid = Discretization(np.array([[5.0]]), np.array([[4.5]]), np.array([[5.5]]), np.array([1.0]), 1.0)
    return spec, pol, V, grid, build_partition(spec.noise, 4)


def test_single_point_check_arithmetic():
    spec, pol, V, grid, part = shift_system(-1.0)  # bound = V(4) = 4, V(5) = 5
    assert check_grid(V, spec, pol, grid, part, 0.5).verified
    rep = check_grid(V, spec, pol, grid, part, 1.5)
    assert rep.outcome == "counterexamples" and rep.n_violations == 1
    np.testing.assert_allclose(rep.cex, [[5.0]])
    assert rep.margins[0] == pytest.approx(0.5, abs=1e-8)


def test_epsilon_arithmetic_and_contract():
    spec, pol, V, grid, part = shift_system(-1.8)  # bound 3.2
    assert compute_epsilon(V, spec, pol, grid, part, 1.0) == pytest.approx(0.8)
    assert compute_epsilon(V, spec, pol, grid, part, 1.1) <= compute_epsilon(V, spec, pol, grid, part, 1.0)
    with pytest.raises(ContractError):
        compute_epsilon(V, spec, pol, grid, part, 2.0)


def test_constant_V_violates_everywhere():
    spec, pol = make_benchmark("2d-system")
    grid = build_grid(spec, 0.05)
    part = build_partition(spec.noise, 4)
    rep = check_grid(constant_mlp([2, 4, 1], 0.0), spec, pol, grid, part, 1.0)
    assert rep.n_violations == len(grid)
    # even with K = 0 a constant cannot decrease strictly
    assert check_grid(constant_mlp([2, 4, 1], 3.0), spec, pol, grid, part, 0.0).n_violations == len(grid)


def test_check_grid_pure_and_sorted():
    g = np.random.default_rng(2)
    spec, pol = make_benchmark("inverted-pendulum")
    grid = build_grid(spec, 0.05)
    part = build_partition(spec.noise, 4)
    V = init_mlp([2, 16, 1], g)
    a = check_grid(V, spec, pol, grid, part, 1.0)
    b = check_grid(V, spec, pol, grid, part, 1.0)
    np.testing.assert_array_equal(a.slack, b.slack)
    np.testing.assert_array_equal(a.cex, b.cex)
    assert np.all(np.diff(a.margins) <= 0) and np.all(a.margins > 0)


def test_global_lower_bound():
    spec, _ = make_benchmark("2d-system")
    assert global_lower_bound(constant_mlp([2, 3, 1], 2.5), spec.state_space) == 2.5
    assert global_lower_bound(constant_mlp([2, 3, 1], -7.0), spec.state_space) == -7.0
    g = np.random.default_rng(3)
    V = init_mlp([2, 32, 1], g)
    lb = global_lower_bound(V, spec.state_space)
    assert np.all(forward(V, spec.state_space.sample(g, 10 ** 4))[:, 0] >= lb)


def test_refine_modes():
    spec, _ = make_benchmark("2d-system")
    grid = build_grid(spec, 0.01)
    fine = refine(spec, grid, None, "scheduled")
    assert fine.tau == pytest.approx(0.002)
    assert refine(spec, grid, [], "on-demand") is grid
    with pytest.raises(ConfigError):
        refine(spec, grid, [], "sometimes")


def test_on_demand_subdivision_of_interior_cell():
    spec, _ = make_benchmark("2d-system")
    grid = build_grid(spec, 0.01)
    i = int(np.flatnonzero(np.all(np.isclose(grid.points, [0.3, -0.4]), axis=1))[0])
    sub = subdivide(spec, grid, [i])
    assert len(sub) == 100
    np.testing.assert_allclose(sub.mesh, 0.001)
    assert sub.cell_lo.min(axis=0) == pytest.approx(grid.cell_lo[i])
    assert sub.cell_hi.max(axis=0) == pytest.approx(grid.cell_hi[i])
    merged = refine(spec, grid, [i], "on-demand")
    assert len(merged) == len(grid) - 1 + 100 and merged.tau == grid.tau


def test_subcells_inside_stab_set_dropped():
    spec, _ = make_benchmark("2d-system")
    grid = build_grid(spec, 0.01)
    i = int(np.flatnonzero(np.all(np.isclose(grid.points, [0.2, 0.0]), axis=1))[0])
    sub = subdivide(spec, grid, [i])
    # half of the cell lies in X_s; those 50 subcells need no check
    assert len(sub) == 50
    assert np.all(sub.cell_lo[:, 0] >= 0.2 - 1e-12)


def test_timeout_zero():
    spec, pol = make_benchmark("2d-system")
    rep = certify(spec, pol, CertifyConfig(), 0, 0)
    assert rep.outcome == "timeout" and rep.certificate is None


def test_certify_config_validation():
    with pytest.raises(ConfigError):
        CertifyConfig(refinement="never")
    with pytest.raises(ConfigError):
        CertifyConfig(k=0)


def small_certify(tau=0.05, seed=0, sink=None):
    spec, pol = linear_1d(a=0.5, s=0.05)
    cfg = CertifyConfig(learner=LearnerConfig(epochs=300, learning_rate=1e-2, tau=0.05), verifier_tau=tau,
                        hidden=(16,), max_iterations=5)
    return spec, pol, certify(spec, pol, cfg, None, seed, sink=sink)


def test_small_end_to_end_certificate_is_sound():
    records = []
    spec, pol, rep = small_certify(sink=records.append)
    assert rep.verified and rep.iterations <= 5
    c = rep.certificate
    assert c.eps > 0 and c.m >= 0 and c.K == compute_K(c.L_V, c.L_f, c.L_pi)
    assert records and records[-1]["violations"] == 0
    g = np.random.default_rng(8)
    x = spec.state_space.sample(g, 1000)
    x = x[~spec.stab_set.contains(x)]
    assert np.all(c.value(x) >= 0)
    mean, sd = mc_expectation(c.network, spec, pol, x, 10 ** 4, 1, return_std=True)
    assert np.all(mean + c.m - 3 * sd / 100 < c.value(x))


def test_certify_deterministic():
    a = small_certify(seed=4)[2].certificate
    b = small_certify(seed=4)[2].certificate
    assert a.eps == b.eps
    for p, q in zip(a.network.params(), b.network.params()):
        np.testing.assert_array_equal(p, q)


def test_certify_from_hand_built_init():
    spec, pol = linear_1d(a=0.5, s=0.05)
    cfg = CertifyConfig(learner=LearnerConfig(epochs=0), verifier_tau=0.02, max_iterations=1)
    rep = certify(spec, pol, cfg, None, 0, init=abs_net())
    # |x| decreases by 0.5|x| >= 0.1 while tau K = 0.02 * 2 * 1.5 = 0.06; on each
    # noise cell the bound takes the cell's upper end, overshooting by 0.05 sum(mass * hi)
    part = build_partition(spec.noise, 16)
    overshoot = 0.05 * float(part.mass @ part.hi[:, 0])
    assert rep.verified
    assert rep.certificate.eps == pytest.approx(0.1 - 0.06 - overshoot, abs=1e-8)
