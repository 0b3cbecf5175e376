import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import LQ_TAU, ZERO, exact_counterexample_extremal
from delaypmp.ocp_model import build_delayed_lq
from delaypmp.solver import ShootingUnknowns, SolveConfig, solve
from delaypmp.time_mesh import DelayVector, SampledFunction
from delaypmp.variations import (ConeSample, NeedleSpec, cone_sample, lebesgue_times, multiplier_check,
                                 needle_endpoint_check, omega_vectors, variation_vector)

LADDER = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
CTRL_TAU = DelayVector(0.0, 0.0, 0.3, 1.0)


@pytest.fixture(scope="module")
def ctrl_delayed():
    prob = build_delayed_lq(K4=0.5, B_delay=[[1.0]])
    ext, _ = solve(prob, CTRL_TAU, ShootingUnknowns([0.0]), cfg=SolveConfig().with_step(2.5e-3))
    return prob, ext


def test_omega_vanishes_for_current_control(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    s = 0.4
    minus, plus = omega_vectors(lq_problem, LQ_TAU, ext, s, ext.u.eval(s))
    assert_allclose(minus, 0.0, atol=1e-15)
    assert_allclose(plus, 0.0, atol=0)


def test_omega_counterexample_value(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    minus, plus = omega_vectors(cx_problem, ZERO, ext, 0.5, [1.0, 0.0])
    assert_allclose(minus, [0.0, 1.0, 0.0], atol=1e-15)
    assert_allclose(plus, 0.0, atol=0)


def test_omega_plus_gated_after_horizon(ctrl_delayed):
    prob, ext = ctrl_delayed
    minus, plus = omega_vectors(prob, CTRL_TAU, ext, 0.8, [2.0])
    assert np.all(plus == 0.0) and np.linalg.norm(minus) > 0
    _, plus_early = omega_vectors(prob, CTRL_TAU, ext, 0.3, [2.0])
    assert np.linalg.norm(plus_early) > 0


def test_omega_rejects_bad_arguments(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    with pytest.raises(ValueError):
        omega_vectors(lq_problem, LQ_TAU, ext, 0.5, [50.0])
    with pytest.raises(ValueError):
        omega_vectors(lq_problem, LQ_TAU, ext, 1.5, [0.0])


def test_variation_vector_basic(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    xi = np.array([0.3, -0.2])
    assert_allclose(variation_vector(lq_problem, LQ_TAU, ext, 0.3, np.zeros(2), 1.0), 0.0, atol=0)
    one = variation_vector(lq_problem, LQ_TAU, ext, 0.3, xi, 1.0)
    two = variation_vector(lq_problem, LQ_TAU, ext, 0.3, 2 * xi, 1.0)
    other = variation_vector(lq_problem, LQ_TAU, ext, 0.3, np.array([1.0, 0.5]), 1.0)
    both = variation_vector(lq_problem, LQ_TAU, ext, 0.3, xi + np.array([1.0, 0.5]), 1.0)
    assert np.max(np.abs(two - 2 * one)) < 1e-10
    assert np.max(np.abs(both - one - other)) < 1e-10
    assert np.linalg.norm(one - xi) > 1e-3


def test_variation_vector_constant_on_counterexample(cx_problem):
    ext = exact_counterexample_extremal(cx_problem)
    xi = np.array([0.2, -0.4, 0.7])
    assert_allclose(variation_vector(cx_problem, ZERO, ext, 0.25, xi, 1.0), xi, atol=1e-14)


def test_noop_needle(cx_problem, cx_solution):
    ext = cx_solution[0]
    spec = NeedleSpec([0.5], [1.0], [ext.u.eval(0.5)])
    res = needle_endpoint_check(cx_problem, ZERO, ext, spec, LADDER)
    assert np.max(res.remainders) <= 1e-12 and res.passed()


def test_frozen_needle_is_second_order(lq_problem, lq_delayed):
    # freezing a smooth control on the needle window only costs O(eta^2)
    ext = lq_delayed[0]
    t1 = float(lebesgue_times(ext, LQ_TAU, 3)[1])
    res = needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([t1], [1.0], [ext.u.eval(t1)]), LADDER)
    assert res.slope == pytest.approx(2.0, abs=0.05)


def test_counterexample_needle_order(cx_problem, cx_solution):
    res = needle_endpoint_check(cx_problem, ZERO, cx_solution[0], NeedleSpec([0.5], [1.0], [[1.0, 0.0]]),
                                LADDER)
    assert res.slope >= 1.5 and res.passed()


def test_delta_axis_order(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    res = needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([], [], [], delta=1.0), LADDER)
    assert res.slope >= 1.5
    assert_allclose(res.first_order, 0.0, atol=0)


def test_delayed_needles_order(lq_problem, lq_delayed, ctrl_delayed):
    ext = lq_delayed[0]
    t = lebesgue_times(ext, LQ_TAU, 4)
    spec = NeedleSpec([t[1], t[2]], [1.0, 0.5], [[2.0], [-1.0]], delta=0.5)
    assert needle_endpoint_check(lq_problem, LQ_TAU, ext, spec, LADDER).slope >= 1.5
    prob, ext2 = ctrl_delayed
    s = float(lebesgue_times(ext2, CTRL_TAU, 5)[1])
    res = needle_endpoint_check(prob, CTRL_TAU, ext2, NeedleSpec([s], [1.0], [[3.0]]), LADDER)
    assert res.slope >= 1.5


def test_needle_validation(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    with pytest.raises(ValueError):
        NeedleSpec([0.5, 0.4], [1.0, 1.0], [[0.0], [0.0]])
    with pytest.raises(ValueError):
        NeedleSpec([0.5], [0.0], [[0.0]])
    with pytest.raises(ValueError):
        needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([0.5], [1.0], [[0.0]]), [1e-3])
    with pytest.raises(ValueError):
        needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([0.005], [1.0], [[0.0]]), LADDER)
    with pytest.raises(ValueError):
        needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([0.5, 0.505], [1.0, 1.0], [[0.0], [0.0]]),
                              LADDER)
    with pytest.raises(ValueError):
        needle_endpoint_check(lq_problem, LQ_TAU, ext, NeedleSpec([0.5], [1.0], [[11.0]]), LADDER)


def test_needle_serialization(tmp_path, cx_problem, cx_solution):
    res = needle_endpoint_check(cx_problem, ZERO, cx_solution[0], NeedleSpec([0.5], [1.0], [[1.0, 0.0]]),
                                LADDER[:3])
    data = json.loads(res.to_json())
    assert data["ladder"] == sorted(LADDER[:3], reverse=True)
    res.to_csv(tmp_path / "n.csv")
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "eta,remainder" and len(lines) == 4


def test_cone_zero_and_size(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    s = lebesgue_times(ext, LQ_TAU, 5)
    noop = cone_sample(lq_problem, LQ_TAU, ext, [(t, ext.u.eval(t)) for t in s])
    assert len(noop) == 5
    assert_allclose(np.array(noop.vectors), 0.0, atol=1e-14)
    aug = cone_sample(lq_problem, LQ_TAU, ext, [(s[0], [1.0])], augmented=True)
    assert len(aug) == 3
    assert_allclose(aug.vectors[1], -aug.vectors[2], atol=0)


def test_cone_counterexample_multiplier(cx_problem, cx_solution):
    ext = cx_solution[0]
    rng = np.random.default_rng(0)
    S = lebesgue_times(ext, ZERO, 100)
    Z = cx_problem.control_set.sample(rng, 100)
    cone = cone_sample(cx_problem, ZERO, ext, list(zip(S, Z)), augmented=True)
    assert len(cone) == 102
    assert_allclose(np.append(ext.p.eval(ext.t_f, "left"), ext.p0), [1.0, 0.0, -1.0], atol=1e-6)
    assert multiplier_check(ext, cone) <= 1e-6


def test_multiplier_sign_flip(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    s = lebesgue_times(ext, LQ_TAU, 4)
    cone = cone_sample(lq_problem, LQ_TAU, ext, [(t, ext.u.eval(t) + 1.0) for t in s])
    pairing = np.array(cone.vectors) @ np.append(ext.p.eval(ext.t_f, "left"), ext.p0)
    assert multiplier_check(ext, cone) == np.max(pairing) < 0
    flipped = SimpleNamespace(p=SampledFunction(ext.p.grid, -ext.p.values, ext.p.interp), p0=-ext.p0,
                              t_f=ext.t_f)
    assert multiplier_check(flipped, cone) == pytest.approx(-np.min(pairing), rel=1e-12)
    assert multiplier_check(flipped, cone) > 0


def test_empty_cone():
    assert multiplier_check(None, ConeSample()) == -math.inf


def test_free_time_endpoint_pairing(cx_problem, cx_solution):
    ext = cx_solution[0]
    aug = cone_sample(cx_problem, ZERO, ext, [], augmented=True)
    psi = np.append(ext.p.eval(ext.t_f, "left"), ext.p0)
    assert abs(aug.vectors[0] @ psi) < 1e-8


def test_cone_vectors_continuous_in_s(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    s = float(lebesgue_times(ext, LQ_TAU, 3)[1])
    base = cone_sample(lq_problem, LQ_TAU, ext, [(s, [1.0])]).vectors[0]
    gaps = [np.linalg.norm(cone_sample(lq_problem, LQ_TAU, ext, [(s + d, [1.0])]).vectors[0] - base)
            for d in (4e-2, 1e-2, 2.5e-3)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_cone_serialization(lq_problem, lq_delayed):
    ext = lq_delayed[0]
    cone = cone_sample(lq_problem, LQ_TAU, ext, [(0.5, [1.0])], augmented=True)
    data = json.loads(cone.to_json())
    assert len(data["vectors"]) == 3 and data["provenance"][-1]["z"] is None
    with pytest.raises(ValueError):
        ConeSample([np.array([np.nan])], [(0.1, None)])


def test_lebesgue_times_avoid_breakpoints(lq_delayed):
    ext = lq_delayed[0]
    t = lebesgue_times(ext, LQ_TAU, 50)
    h = ext.x.grid.h
    assert t.size == 50 and np.all(np.diff(t) > 0)
    assert np.all((t > 0) & (t < ext.t_f))
    breaks = 0.2 * np.arange(6)
    assert np.min(np.abs(t[:, None] - breaks[None])) > 2 * h
