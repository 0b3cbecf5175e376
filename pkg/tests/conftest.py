import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from delaypmp.ocp_model import build_counterexample, build_delayed_lq, regularized  # noqa: E402
from delaypmp.pmp_core import Extremal  # noqa: E402
from delaypmp.solver import ShootingUnknowns, SolveConfig, solve  # noqa: E402
from delaypmp.time_mesh import DelayVector, SampledFunction, TimeGrid  # noqa: E402

ZERO = DelayVector(0.0, 0.0, 0.0, 1.0)
LQ_TAU = DelayVector(0.0, 0.2, 0.0, 1.0)
CX_TAU = DelayVector(0.05, 0.0, 0.0, 1.0)


def exact_counterexample_extremal(prob, n_steps=200):
    """The known extremal x = (t, 0), p = (1, 0), p0 = -1, u = 0, t_f = 1."""
    grid = TimeGrid(0.0, 1.0, n_steps)
    t = grid.nodes
    x = SampledFunction(grid, np.stack([t, 0 * t], axis=1), "linear", history=prob.history_state)
    p = SampledFunction(grid, np.tile([1.0, 0.0], (t.size, 1)), "linear")
    u = SampledFunction(grid, np.zeros((t.size, 2)), "linear", history=prob.history_control)
    return Extremal(x, p, -1.0, u, 1.0, ZERO)


@pytest.fixture(scope="session")
def cx_problem():
    return build_counterexample(0.0)


@pytest.fixture(scope="session")
def cx_solution(cx_problem):
    cfg = SolveConfig().with_step(5e-3)
    return solve(cx_problem, ZERO, ShootingUnknowns([0.8, 0.1], 0.9), cfg=cfg)


@pytest.fixture(scope="session")
def lq_problem():
    return build_delayed_lq()


@pytest.fixture(scope="session")
def lq_zero(lq_problem):
    return solve(lq_problem, ZERO, ShootingUnknowns([0.0]), cfg=SolveConfig().with_step(2e-3))


@pytest.fixture(scope="session")
def lq_delayed(lq_problem, lq_zero):
    return solve(lq_problem, LQ_TAU, ShootingUnknowns(lq_zero[0].p.eval(0.0)), warm=lq_zero[0],
                 cfg=SolveConfig().with_step(2e-3))


@pytest.fixture(scope="session")
def cx_regularized():
    """Counterexample at tau0 = 0.05 with an added 0.02 |u|^2 running cost."""
    base = build_counterexample(0.0)
    cfg = SolveConfig(smoothing_mode="never").with_step(2e-3)
    z = [1.0, 0.0, 1.0]
    for eps in (0.5, 0.1, 0.02):
        prob = regularized(base, eps)
        ext, rep = solve(prob, CX_TAU, ShootingUnknowns(z[:2], z[2]), cfg=cfg)
        z = ext.info["unknowns"]
    return prob, ext, rep
