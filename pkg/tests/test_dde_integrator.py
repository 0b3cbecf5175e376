import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import ZERO, exact_counterexample_extremal
from delaypmp.dde_integrator import (IntegratorConfig, NonFiniteState, integrate_adjoint, integrate_cost,
                                     integrate_state)
from delaypmp.ocp_model import ControlSet, OcpProblem, Target, build_delayed_lq
from delaypmp.time_mesh import DelayVector, SampledFunction, TimeGrid, constant_function
from oracles import lq_collocation, method_of_steps, method_of_steps_eval


def scalar_problem(dynamics, cost=None, t_f=2.0, x0=1.0):
    cost = cost or (lambda t, s, x, y, u, v: np.zeros(np.shape(x)[:-1]))
    return OcpProblem("scalar", 1, 1, dynamics=dynamics, running_cost=cost,
                      control_set=ControlSet.box([-1], [1]), target=Target.free(1),
                      history_state=constant_function([x0], -1.0, 0.0, "linear"),
                      history_control=constant_function([0.0], -1.0, 0.0), final_time=t_f, vectorized=True)


RETARDED = scalar_problem(lambda t, s, x, y, u, v: -y)
UNIT_LAG = DelayVector(0.0, 1.0, 0.0, 1.0)


def zero_control(t_f):
    return constant_function([0.0], 0.0, t_f)


def test_zero_field_keeps_initial_state():
    prob = scalar_problem(lambda t, s, x, y, u, v: np.zeros_like(x), x0=2.5)
    x = integrate_state(prob, ZERO, zero_control(2.0), 2.0, IntegratorConfig(h=0.01))
    assert_allclose(x.sample(np.linspace(-1, 2, 31)), 2.5, atol=0)


def test_unit_lag_against_hand_solution():
    x = integrate_state(RETARDED, UNIT_LAG, zero_control(2.0), 2.0, IntegratorConfig(h=1e-3))
    t = np.linspace(0, 2, 2001)
    exact = np.where(t <= 1, 1 - t, t ** 2 / 2 - 2 * t + 1.5)
    assert np.max(np.abs(x.sample(t)[:, 0] - exact)) < 1e-8
    assert_allclose(x.sample(np.linspace(-1, 0, 11))[:, 0], 1.0, atol=0)


def test_unit_lag_order():
    T = 4.0
    pieces = method_of_steps(4)
    prob = RETARDED.with_(final_time=T)
    hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    t = np.linspace(0, T, 8001)
    errs = []
    for h in hs:
        x = integrate_state(prob, UNIT_LAG, zero_control(T), T, IntegratorConfig(h=h))
        errs.append(np.max(np.abs(x.sample(t)[:, 0] - method_of_steps_eval(pieces, t))))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 2.8


def test_counterexample_zero_control(cx_problem):
    u = constant_function([0.0, 0.0], 0.0, 1.0)
    x = integrate_state(cx_problem, ZERO, u, 1.0, IntegratorConfig(h=0.01))
    t = np.linspace(0, 1, 51)
    assert_allclose(x.sample(t), np.stack([t, 0 * t], axis=1), atol=1e-13)


def test_resolution_guard():
    with pytest.raises(ValueError, match="resolution guard"):
        integrate_state(RETARDED, UNIT_LAG, zero_control(2.0), 2.0, IntegratorConfig(h=0.5),
                        grid=TimeGrid(0.0, 2.0, 4))
    grid = IntegratorConfig(h=0.5).grid(2.0, UNIT_LAG)
    assert grid.h <= 0.25


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_detected():
    prob = scalar_problem(lambda t, s, x, y, u, v: x ** 2, t_f=2.0)
    with pytest.raises(NonFiniteState):
        integrate_state(prob, ZERO, zero_control(2.0), 2.0, IntegratorConfig(h=1e-2))


@pytest.mark.parametrize("cost, expected", [
    (lambda t, s, x, y, u, v: np.ones(np.shape(x)[:-1]), 2.0),
    (lambda t, s, x, y, u, v: np.zeros(np.shape(x)[:-1]), 0.0),
    (lambda t, s, x, y, u, v: np.asarray(t, dtype=float) * np.ones(np.shape(x)[:-1]), 2.0),
])
def test_cost_quadrature(cost, expected):
    prob = scalar_problem(lambda t, s, x, y, u, v: np.zeros_like(x), cost)
    x = integrate_state(prob, ZERO, zero_control(2.0), 2.0, IntegratorConfig(h=0.05))
    assert abs(integrate_cost(prob, ZERO, x, zero_control(2.0), 2.0, IntegratorConfig(h=0.05)) - expected) < 1e-13


def test_minimum_time_cost(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    assert integrate_cost(cx_problem, ZERO, ext.x, ext.u, 1.0) == pytest.approx(1.0, abs=1e-13)


def test_adjoint_constant_for_integrator_chain():
    prob = scalar_problem(lambda t, s, x, y, u, v: u, t_f=1.0)
    x = integrate_state(prob, ZERO, zero_control(1.0), 1.0)
    p = integrate_adjoint(prob, ZERO, x, zero_control(1.0), [0.7], -1.0, 1.0)
    assert_allclose(p.values, 0.7, atol=1e-15)


def test_counterexample_adjoint(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    p = integrate_adjoint(cx_problem, ZERO, ext.x, ext.u, [1.0, 0.0], -1.0, 1.0, IntegratorConfig(h=0.01))
    assert_allclose(p.values, np.tile([1.0, 0.0], (p.values.shape[0], 1)), atol=1e-14)


def test_indicator_exact_beyond_final_lag():
    # p' = -p(t + 0.3) gate; dH/dx = 0, so p is exactly constant on [t_f - tau1, t_f]
    prob = scalar_problem(lambda t, s, x, y, u, v: y, t_f=1.0)
    tau = DelayVector(0.0, 0.3, 0.0, 1.0)
    x = integrate_state(prob, tau, zero_control(1.0), 1.0)
    p = integrate_adjoint(prob, tau, x, zero_control(1.0), [1.0], -1.0, 1.0, IntegratorConfig(h=0.01))
    tail = p.grid.nodes >= 0.7 - 1e-12
    assert np.all(p.values[tail, 0] == 1.0)
    # before the gate the advanced term acts: p(t) = 1 + (0.7 - t) on [0.4, 0.7]
    assert_allclose(p.eval(0.5), [1.2], atol=1e-12)


def test_lq_adjoint_against_collocation():
    prob = build_delayed_lq()
    tau = DelayVector(0.0, 0.3, 0.0, 1.0)
    t, xc, uc = lq_collocation([[0.0]], [[1.0]], [[1.0]], [[0.0]], (1, 0, 1, 0), [1.0], 0.3, 0.0, 1.0,
                               n_nodes=801)
    grid = TimeGrid(0.0, 1.0, 800)
    x = SampledFunction(grid, xc, "linear", history=prob.history_state)
    u = SampledFunction(grid, uc, "linear", history=prob.history_control)
    p = integrate_adjoint(prob, tau, x, u, [0.0], -1.0, 1.0, IntegratorConfig(h=1.25e-3), grid=grid)
    # unsaturated stationarity p = 2 K3 u
    assert np.max(np.abs(p.values[:, 0] - 2.0 * uc[:, 0])) < 1e-4


def test_backward_forward_consistency():
    # x' = -x + u with u = p / 2 forward, then the adjoint backward from the end
    prob = build_delayed_lq(A=[[-1.0]], B=[[1.0]], B_delay=[[0.0]], x0=[1.0])
    h = 1e-3
    grid = TimeGrid(0.0, 1.0, 1000)
    p_start = -0.4

    def rhs(z):
        x, p = z
        return np.array([-x + p / 2.0, p + 2.0 * x])

    z = np.array([1.0, p_start])
    traj = [z]
    for _ in range(grid.n_steps):
        k1 = rhs(z)
        k2 = rhs(z + h / 2 * k1)
        k3 = rhs(z + h / 2 * k2)
        k4 = rhs(z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        traj.append(z)
    traj = np.array(traj)
    x = SampledFunction(grid, traj[:, :1], "linear", history=prob.history_state)
    u = SampledFunction(grid, traj[:, 1:] / 2.0, "linear", history=prob.history_control)
    p = integrate_adjoint(prob, ZERO, x, u, traj[-1, 1:], -1.0, 1.0, IntegratorConfig(h=h), grid=grid)
    assert abs(p.values[0, 0] - p_start) < 1e-6


def test_heun_scheme_runs():
    x = integrate_state(RETARDED, UNIT_LAG, zero_control(2.0), 2.0, IntegratorConfig(h=1e-3, scheme="heun"))
    assert abs(x.eval(1.5)[0] - (1.5 ** 2 / 2 - 3 + 1.5)) < 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(h=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(scheme="euler")
