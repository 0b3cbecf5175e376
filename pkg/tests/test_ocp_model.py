import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from delaypmp.dde_integrator import IntegratorConfig, integrate_state
from delaypmp.ocp_model import (ControlSet, OcpProblem, Target, build_counterexample, build_delayed_lq,
                                fd_jacobians, guinn_reduce, hamiltonian, regularized)
from delaypmp.time_mesh import DelayVector, SampledFunction, TimeGrid, constant_function


def test_counterexample_structure():
    prob = build_counterexample(0.0)
    rng = np.random.default_rng(1)
    t = rng.uniform(0, 1, 10)
    x, u = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    f = prob.f_batch(t, t, x, x, u, u)      # s = t: tau0 = 0
    assert_allclose(f[:, 0], 1 - x[:, 1] ** 2)
    assert_allclose(f[:, 1], u[:, 0])
    assert_allclose(prob.f0_batch(t, t, x, x, u, u), 1.0)
    assert prob.control_set.contains([0.6, 0.8])
    assert not prob.control_set.contains([0.8, 0.8])
    assert prob.free_time and prob.target.is_point


def test_counterexample_oscillators():
    prob = build_counterexample(0.1, K=10)
    t, s = np.array([0.5]), np.array([0.4])
    x = np.array([[0.3, 0.2]])
    u = np.array([[0.1, 0.7]])
    f = prob.f_batch(t, s, x, x, u, u)[0]
    g, h = np.cos(2 * np.pi * 10 * 0.3), np.sin(2 * np.pi * 10 * 0.3)
    assert_allclose(f, [1 - 0.04 + 0.1 * 0.7 * g, 0.1 + 0.1 * 0.7 * h], rtol=1e-12)


def test_hamiltonian_examples():
    prob = build_counterexample(0.0)
    z = np.zeros(2)
    assert hamiltonian(prob, 0.3, 0.3, np.array([0.3, 0.0]), z, z, 0.0, z, z) == 0.0
    H = hamiltonian(prob, 0.3, 0.3, np.array([0.3, 0.0]), z, np.array([1.0, 0.0]), -1.0, z, z)
    assert abs(H) < 1e-15


def test_lq_two_representations_agree():
    prob = build_delayed_lq(K2=0.3, K4=0.2, B_delay=[[0.5]])
    rng = np.random.default_rng(3)
    t, s, x, y, u, v = prob.random_points(rng, 20)
    aff = prob.affine
    p = rng.normal(size=(20, 1))
    H_generic = hamiltonian(prob, t, s, x, y, p, -1.0, u, v)
    f_aff = aff.dynamics(t, s, x, y, u, v)
    H_aff = np.sum(p * f_aff, axis=1) - aff.running_cost(t, s, x, y, u, v)
    assert_allclose(H_generic, H_aff, atol=1e-12)


@pytest.mark.parametrize("builder", [lambda: build_counterexample(0.1),
                                     lambda: build_counterexample(0.0, K=0),
                                     lambda: build_delayed_lq(K2=0.5, K4=0.5, B_delay=[[1.0]]),
                                     lambda: regularized(build_counterexample(0.0), 0.1)])
def test_jacobians_match_finite_differences(builder):
    prob = builder()
    rng = np.random.default_rng(7)
    pts = prob.random_points(rng, 50)
    for i in range(50):
        args = [a[i] for a in pts]
        fd = fd_jacobians(prob, *args)
        for key in "xyuv":
            J = prob.jacobian_point(key, *args)
            assert np.max(np.abs(J - fd[key])) <= 1e-5 * max(1.0, np.max(np.abs(fd[key])))


def test_lq_jac_y():
    prob = build_delayed_lq()
    rng = np.random.default_rng(0)
    t, s, x, y, u, v = [a[0] for a in prob.random_points(rng, 1)]
    assert_allclose(prob.jacobian_point("y", t, s, x, y, u, v), fd_jacobians(prob, t, s, x, y, u, v)["y"],
                    atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_hamiltonian_affine_in_controls(alpha, seed):
    prob = build_counterexample(0.05)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1)
    x, y, p = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
    u1, u2, v = prob.control_set.sample(rng, 3)
    H = lambda u: hamiltonian(prob, t, t - 0.05, x, y, p, -1.0, u, v)
    assert abs(H(alpha * u1 + (1 - alpha) * u2) - (alpha * H(u1) + (1 - alpha) * H(u2))) < 1e-12


def test_inconsistent_jacobian_rejected():
    good = build_delayed_lq()
    with pytest.raises(ValueError, match="jac_x"):
        good.with_(jac_x=lambda t, s, x, y, u, v: np.zeros((2, 1)) + 3.0, check=True)


def test_history_control_must_lie_in_set():
    prob = build_counterexample(0.0)
    with pytest.raises(ValueError):
        prob.with_(history_control=constant_function([2.0, 0.0], -1.0, 0.0), check=True)


def test_control_sets():
    box = ControlSet.box([-1, 0], [1, 2])
    assert_allclose(box.project(np.array([3.0, -1.0])), [1.0, 0.0])
    ball = ControlSet.ball(2.0)
    assert_allclose(ball.project(np.array([3.0, 4.0])), [1.2, 1.6])
    assert ball.contains(ball.lattice(7))
    rng = np.random.default_rng(0)
    assert box.contains(box.sample(rng, 50))


def test_target_tangent_and_distance():
    tgt = Target.affine([[1.0, 0.0]], [1.0])
    assert_allclose(np.abs(tgt.tangent_basis().ravel()), [0.0, 1.0])
    assert tgt.distance([3.0, 5.0]) == pytest.approx(2.0)
    assert Target.point([1, 0]).tangent_basis().shape == (2, 0)


def test_regularized_adds_quadratic_cost():
    prob = build_counterexample(0.0)
    reg = regularized(prob, 0.3)
    t = np.array([0.2])
    x = np.array([[0.1, 0.1]])
    u = np.array([[0.3, 0.4]])
    assert_allclose(reg.f0_batch(t, t, x, x, u, u), 1 + 0.3 * 0.25)
    assert reg.affine.ru == pytest.approx(0.3)
    assert regularized(prob, 0.0) is prob


# ----------------------------------------------------------------------
# Stacked reduction of a pure control delay
# ----------------------------------------------------------------------
def _pure_control_delay(t_f):
    return build_delayed_lq(A=[[0.0]], B=[[0.0]], B_delay=[[1.0]], x0=[0.0], t_f=t_f, u_bound=1.0)


def test_guinn_boundary_rejected():
    prob = _pure_control_delay(1.0)
    with pytest.raises(ValueError):
        guinn_reduce(prob, DelayVector(0, 0, 0.5, 1.0), 2)
    with pytest.raises(ValueError):
        guinn_reduce(prob, DelayVector(0, 0.1, 0.5, 1.0), 1)


def test_guinn_first_block_uses_history():
    prob = _pure_control_delay(0.3).with_(history_control=constant_function([0.5], -1.0, 0.0), check=False)
    red = guinn_reduce(prob, DelayVector(0, 0, 0.4, 1.0), 0)
    grid = TimeGrid(0.0, 0.4, 40)
    W = SampledFunction(grid, np.full((41, 1), -1.0), "linear")
    X = red.simulate(W)
    # only the history control drives x, and only up to t_f = 0.3
    assert_allclose(X.eval(0.3), [0.15], atol=1e-12)
    assert_allclose(X.eval(0.4), [0.15], atol=1e-12)


def test_guinn_unstack_matches_direct_simulation():
    prob = _pure_control_delay(1.0)
    tau = DelayVector(0, 0, 0.5, 1.0)
    red = guinn_reduce(prob, tau, 1)
    grid = TimeGrid(0.0, 1.0, 400)
    u = SampledFunction(grid, np.sin(3 * grid.nodes)[:, None], "linear", history=prob.history_control)
    x_direct = integrate_state(prob, tau, u, 1.0, IntegratorConfig(h=2.5e-3))
    W = red.stack_control(u, TimeGrid(0.0, 0.5, 200))
    x_red = red.unstack_state(red.simulate(W), grid)
    assert red.problem.state_dim == 2 and red.problem.control_dim == 2
    assert np.max(np.abs(x_red.values - x_direct.sample(grid.nodes))) < 1e-8


def test_custom_problem_fd_fallback():
    prob = OcpProblem(
        name="scalar", state_dim=1, control_dim=1,
        dynamics=lambda t, s, x, y, u, v: -x + u,
        running_cost=lambda t, s, x, y, u, v: u[0] ** 2,
        control_set=ControlSet.box([-1], [1]), target=Target.free(1),
        history_state=constant_function([1.0], -1, 0, "linear"),
        history_control=constant_function([0.0], -1, 0), final_time=1.0)
    J = prob.jacobians_batch(np.zeros(2), np.zeros(2), np.ones((2, 1)), np.ones((2, 1)),
                             np.full((2, 1), 0.5), np.zeros((2, 1)), "xu")
    assert_allclose(J["x"][:, :, 0], [[-1, 0], [-1, 0]], atol=1e-8)
    assert_allclose(J["u"][:, :, 0], [[1, 1], [1, 1]], atol=1e-8)
