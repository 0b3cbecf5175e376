import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from conftest import LQ_TAU, ZERO, exact_counterexample_extremal
from delaypmp.ocp_model import (AffineStructure, ControlSet, OcpProblem, Target, build_counterexample,
                                build_delayed_lq)
from delaypmp.pmp_core import (Extremal, ResidualReport, free_time_residual, maximality_defect, residual_report,
                               synthesize_control, transversality_residual)
from delaypmp.time_mesh import DelayVector, SampledFunction, TimeGrid, constant_function


def _functions(grid, x, p, prob):
    xs = SampledFunction(grid, x, "linear", history=prob.history_state)
    ps = SampledFunction(grid, p, "linear")
    return xs, ps


def test_counterexample_singular_at_zero_delay(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    syn = synthesize_control(cx_problem, ZERO, ext.x, ext.p, -1.0, 1.0)
    assert syn.singular
    assert np.all(syn.u.values == 0.0)
    assert_allclose(syn.phi, 0.0, atol=0)


def test_counterexample_ball_law():
    prob = build_counterexample(0.1, g=lambda z: np.ones_like(z), h=lambda z: np.ones_like(z),
                                dg=lambda z: np.zeros_like(z), dh=lambda z: np.zeros_like(z))
    tau = DelayVector(0.1, 0.0, 0.0, 1.0)
    grid = TimeGrid(0.0, 1.0, 10)
    rng = np.random.default_rng(0)
    x, p = _functions(grid, rng.normal(size=(11, 2)), np.tile([1.0, 0.5], (11, 1)), prob)
    u = synthesize_control(prob, tau, x, p, -1.0, 1.0).u.values
    phi = 0.5 ** 2 + 0.1 ** 2 * 1.5 ** 2
    expected = np.array([0.5, 0.1 * 1.5]) / np.sqrt(phi)
    assert_allclose(u, np.tile(expected, (u.shape[0], 1)), atol=1e-14)
    assert_allclose(np.sum(u ** 2, axis=1), 1.0, atol=1e-14)


def test_box_switch():
    zeros = lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (1,))
    aff = AffineStructure(drift=lambda t, s, x, y: np.zeros(np.shape(x)),
                          f1=lambda t, s, x, y: np.ones(np.shape(x)[:-1] + (1, 1)),
                          f2=lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (1, 1)),
                          cost_drift=lambda t, s, x, y: np.ones(np.shape(x)[:-1]), cost_u=zeros, cost_v=zeros)
    prob = OcpProblem("integrator", 1, 1, dynamics=aff.dynamics, running_cost=aff.running_cost,
                      control_set=ControlSet.box([-1.0], [1.0]), target=Target.free(1),
                      history_state=constant_function([0.0], -1.0, 0.0, "linear"),
                      history_control=constant_function([0.0], -1.0, 0.0), final_time=1.0,
                      affine=aff, vectorized=True)
    grid = TimeGrid(0.0, 1.0, 100)
    x, p = _functions(grid, np.zeros((101, 1)), (grid.nodes - 0.5)[:, None], prob)
    syn = synthesize_control(prob, ZERO, x, p, -1.0, 1.0, grid=grid)
    t, u = grid.nodes, syn.u.values[:, 0]
    assert np.all(u[t < 0.5 - 1e-9] == -1.0) and np.all(u[t > 0.5 + 1e-9] == 1.0)


def test_regularized_closed_form():
    prob = build_delayed_lq(u_bound=0.3)
    grid = TimeGrid(0.0, 1.0, 10)
    x, p = _functions(grid, np.ones((11, 1)), np.linspace(-1, 1, 11)[:, None], prob)
    u = synthesize_control(prob, ZERO, x, p, -1.0, 1.0, grid=grid).u.values[:, 0]
    assert_allclose(u, np.clip(np.linspace(-1, 1, 11) / 2.0, -0.3, 0.3), atol=1e-15)


def test_unknown_mode_rejected(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    with pytest.raises(ValueError):
        synthesize_control(cx_problem, ZERO, ext.x, ext.p, -1.0, 1.0, mode="simplex")


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_positive_homogeneity(lam, seed):
    prob = build_counterexample(0.05)
    tau = DelayVector(0.05, 0.0, 0.0, 1.0)
    grid = TimeGrid(0.0, 1.0, 20)
    rng = np.random.default_rng(seed)
    X, P = rng.normal(size=(21, 2)), rng.normal(size=(21, 2))
    x, p = _functions(grid, X, P, prob)
    _, p_scaled = _functions(grid, lam * P, P, prob)
    a = synthesize_control(prob, tau, x, p, -1.0, 1.0, grid=grid)
    b = synthesize_control(prob, tau, x, p_scaled, -lam, 1.0, grid=grid)
    ok = ~(a.singular_mask | b.singular_mask)
    assert_allclose(a.u.values[ok], b.u.values[ok], atol=1e-12)
    assert_allclose(np.linalg.norm(a.u.values[ok], axis=1), 1.0, atol=1e-12)


def test_grid_search_is_maximal_on_its_lattice(lq_problem):
    grid = TimeGrid(0.0, 1.0, 50)
    rng = np.random.default_rng(4)
    x, p = _functions(grid, rng.normal(size=(51, 1)), 10 * rng.normal(size=(51, 1)), lq_problem)
    syn = synthesize_control(lq_problem, LQ_TAU, x, p, -1.0, 1.0, mode="grid-search", grid=grid,
                             lattice_size=41)
    ext = Extremal(x, p, -1.0, syn.u, 1.0, LQ_TAU)
    assert maximality_defect(lq_problem, LQ_TAU, ext, lattice_size=41) <= 0.0


def test_counterexample_extremal_is_maximal(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    assert maximality_defect(cx_problem, ZERO, ext) <= 1e-10


def test_perturbed_control_detected(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    assert maximality_defect(lq_problem, LQ_TAU, ext) <= 1e-8
    bumped = SampledFunction(ext.u.grid, ext.u.values + 0.1, ext.u.interp, history=ext.u.history)
    bad = Extremal(ext.x, ext.p, ext.p0, bumped, ext.t_f, LQ_TAU)
    assert maximality_defect(lq_problem, LQ_TAU, bad) > 1e-3


def _terminal_extremal(p_final, target_prob):
    grid = TimeGrid(0.0, 1.0, 4)
    x, p = _functions(grid, np.zeros((5, 2)), np.tile(p_final, (5, 1)), target_prob)
    u = constant_function([0.0, 0.0], 0.0, 1.0)
    return Extremal(x, p, -1.0, u, 1.0, ZERO)


@pytest.mark.parametrize("p_final, target, expected", [
    ([3.0, 1.0], Target.point([1.0, 0.0]), 0.0),
    ([3.0, 0.0], Target.affine([[1.0, 0.0]], [1.0]), 0.0),
    ([3.0, 1.0], Target.affine([[1.0, 0.0]], [1.0]), 1.0),
])
def test_transversality(cx_problem, p_final, target, expected):
    r = transversality_residual(_terminal_extremal(p_final, cx_problem), target)
    assert np.linalg.norm(r) == pytest.approx(expected, abs=1e-15)


def test_free_time_residual_counterexample(cx_problem):
    assert abs(free_time_residual(cx_problem, ZERO, exact_counterexample_extremal(cx_problem))) <= 1e-10


def test_free_time_residual_rejects_fixed_time(lq_problem, lq_zero):
    with pytest.raises(ValueError):
        free_time_residual(lq_problem, ZERO, lq_zero[0])


def double_integrator():
    return OcpProblem("double-integrator", 2, 1,
                      dynamics=lambda t, s, x, y, u, v: np.stack([x[..., 1], u[..., 0]], axis=-1),
                      running_cost=lambda t, s, x, y, u, v: np.ones(np.shape(x)[:-1]),
                      control_set=ControlSet.box([-1.0], [1.0]), target=Target.point([1.0, 0.0]),
                      history_state=constant_function([0.0, 0.0], -1.0, 0.0, "linear"),
                      history_control=constant_function([0.0], -1.0, 0.0), vectorized=True)


def bang_bang_extremal(prob, a):
    """Accelerate on [0, a], brake on [a, 2a]; adjoint of the a = 1 solution."""
    grid = TimeGrid(0.0, 2 * a, 400)
    t = grid.nodes
    u = np.where(t < a, 1.0, -1.0)
    x2 = np.where(t < a, t, 2 * a - t)
    x1 = np.where(t < a, t ** 2 / 2, a ** 2 - (2 * a - t) ** 2 / 2)
    p = np.stack([np.ones_like(t), 1.0 - t], axis=1)
    xs, ps = _functions(grid, np.stack([x1, x2], axis=1), p, prob)
    return Extremal(xs, ps, -1.0, SampledFunction(grid, u[:, None], "constant", history=prob.history_control),
                    2 * a, ZERO)


def test_free_time_residual_double_integrator():
    prob = double_integrator()
    assert abs(free_time_residual(prob, ZERO, bang_bang_extremal(prob, 1.0))) < 1e-12
    assert abs(free_time_residual(prob, ZERO, bang_bang_extremal(prob, 1.1))) == pytest.approx(0.2, abs=1e-9)


def test_report_json_round_trip(lq_problem, lq_delayed):
    ext, rep = lq_delayed
    again = ResidualReport.from_json(rep.to_json())
    assert again == rep
    assert set(json.loads(rep.to_json())) == {"adjoint_defect", "maximality_defect", "transversality_defect",
                                              "free_time_defect", "boundary_defect"}
    assert residual_report(lq_problem, LQ_TAU, ext).within({"adjoint_defect": 1e-6, "maximality_defect": 1e-8})


def test_report_rejects_negative():
    with pytest.raises(ValueError):
        ResidualReport(-1.0, 0.0, 0.0, 0.0, 0.0)


def test_extremal_invariants(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    with pytest.raises(ValueError):
        Extremal(ext.x, ext.p, 0.5, ext.u, 1.0, ZERO)
    zero_p = SampledFunction(ext.p.grid, 0 * ext.p.values, "linear")
    with pytest.raises(ValueError):
        Extremal(ext.x, zero_p, 0.0, ext.u, 1.0, ZERO)
    assert Extremal(ext.x, zero_p, -1.0, ext.u, 1.0, ZERO).normal


def test_extremal_csv_round_trip(tmp_path, lq_problem, lq_delayed):
    ext = lq_delayed[0]
    ext.to_csv(tmp_path / "e.csv")
    back = Extremal.from_csv(tmp_path / "e.csv", lq_problem, LQ_TAU)
    t = ext.u.grid.nodes
    assert np.array_equal(back.u.values, ext.u.values)
    assert_allclose(back.x.sample(t), ext.x.sample(t), atol=0)
    (tmp_path / "bad.csv").write_text("t,a\n0,1\n1,2\n")
    with pytest.raises(ValueError):
        Extremal.from_csv(tmp_path / "bad.csv", lq_problem, LQ_TAU)
