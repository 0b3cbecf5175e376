"""Numerical Pontryagin extremals for optimal control problems with constant delays."""

from .dde_integrator import IntegratorConfig, NonFiniteState, integrate_adjoint, integrate_cost, integrate_state
from .homotopy import (ContinuityReport, HomotopyPath, HomotopyPolicy, HomotopyStuck, continue_to,
                       continuity_metrics)
from .ocp_model import (AffineStructure, ControlSet, OcpProblem, Target, build_counterexample, build_delayed_lq,
                        guinn_reduce, hamiltonian, regularized)
from .pmp_core import Extremal, ResidualReport, residual_report, synthesize_control
from .solver import (DEFAULT_REPORT_TOL, GuinnSolution, NewtonStalled, ShootingUnknowns, SolveConfig, SweepConfig,
                     SweepDiverged, solve, solve_guinn)
from .time_mesh import DelayVector, SampledFunction, TimeGrid
from .variations import (ConeSample, NeedleSpec, cone_sample, multiplier_check, needle_endpoint_check,
                         omega_vectors, variation_vector)

__version__ = "0.1.0"
