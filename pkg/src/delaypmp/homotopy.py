"""Continuation in the delay parameter.

The path ``tau(s) = s * target`` is followed from ``s = 0`` (an extremal of
the non-delayed problem) to ``s = 1``.  Each step warm-starts the shooting
solver from the previous extremal; rejected steps halve ``ds`` and two
accepted steps in a row double it again, never above the initial value.

:func:`continuity_metrics` compares every accepted extremal with the
``tau = 0`` one on a common mesh.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import legendre

from .ocp_model import OcpProblem
from .pmp_core import Extremal, ResidualReport, residual_report
from .solver import (NewtonStalled, ShootingUnknowns, SolveConfig, SweepDiverged, check_configuration,
                     solve)
from .time_mesh import DelayVector

__all__ = [
    "HomotopyStuck",
    "HomotopyPolicy",
    "HomotopyStep",
    "HomotopyPath",
    "ContinuityReport",
    "continue_to",
    "continuity_metrics",
]


class HomotopyStuck(RuntimeError):
    """The step size fell below the policy minimum.

    ``last_tau`` is the last accepted delay and ``path`` the partial path.
    """

    def __init__(self, message: str, last_tau: DelayVector, diagnostics: list, path: "HomotopyPath") -> None:
        super().__init__(message)
        self.last_tau = last_tau
        self.diagnostics = diagnostics
        self.path = path


@dataclass(frozen=True)
class HomotopyPolicy:
    """Step control for :func:`continue_to`."""

    initial_step: float = 0.25
    min_step: float = 1.0 / 1024.0
    grow_after: int = 2
    solve: SolveConfig = field(default_factory=SolveConfig)

    def __post_init__(self) -> None:
        if not 0 < self.min_step <= self.initial_step <= 1:
            raise ValueError("need 0 < min_step <= initial_step <= 1")
        if self.grow_after < 1:
            raise ValueError("grow_after must be at least 1")


@dataclass
class HomotopyStep:
    s: float
    tau: DelayVector
    extremal: Optional[Extremal]
    report: Optional[ResidualReport]
    accepted: bool
    message: str = ""

    @property
    def newton_iterations(self) -> int:
        return int(self.extremal.info.get("newton_iterations", 0)) if self.extremal is not None else 0


@dataclass
class HomotopyPath:
    """Ordered steps from ``tau = 0`` towards ``target``."""

    steps: list
    target: DelayVector

    @property
    def accepted(self) -> list:
        return [st for st in self.steps if st.accepted]

    @property
    def final(self) -> HomotopyStep:
        return self.accepted[-1]

    @property
    def complete(self) -> bool:
        return bool(self.accepted) and (self.accepted[-1].s == 1.0 or self.target.is_zero)

    def to_directory(self, out, test_set_size: int = 8) -> None:
        """Write one CSV per accepted step, ``path.json`` and ``continuity.csv``."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        k = 0
        for st in self.steps:
            entry = {"s": st.s, "tau": list(st.tau.as_tuple()), "accepted": st.accepted,
                     "report": None if st.report is None else json.loads(st.report.to_json())}
            if st.accepted:
                name = f"step_{k:03d}.csv"
                st.extremal.to_csv(out / name)
                entry["file"] = name
                entry["t_f"] = st.extremal.t_f
                entry["newton_iterations"] = st.newton_iterations
                entry["singular_arcs"] = len(st.extremal.info.get("singular_arcs", []))
                k += 1
            else:
                entry["message"] = st.message
            entries.append(entry)
        manifest = {"target": list(self.target.as_tuple()), "delta": self.target.delta,
                    "complete": self.complete, "steps": entries}
        (out / "path.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        continuity_metrics(self, test_set_size).to_csv(out / "continuity.csv")


def _unknowns(prob: OcpProblem, ext: Extremal) -> ShootingUnknowns:
    return ShootingUnknowns(ext.p.eval(0.0), ext.t_f if prob.free_time else None)


def continue_to(prob_family: Callable[[DelayVector], OcpProblem], target: DelayVector, seed: Extremal,
                policy: HomotopyPolicy | None = None) -> HomotopyPath:
    """Follow ``tau(s) = s * target`` from the ``tau = 0`` extremal ``seed``.

    Raises
    ------
    ValueError
        ``seed`` does not pass its residual report at ``tau = 0``, or the
        target configuration is unsupported.
    HomotopyStuck
        The step size dropped below ``policy.min_step``.
    """
    policy = policy or HomotopyPolicy()
    zero = target.scaled(0.0)
    prob0 = prob_family(zero)
    rep0 = residual_report(prob0, zero, seed, policy.solve.sweep.lattice_size)
    if not rep0.within(policy.solve.report_tol):
        raise ValueError(f"seed is not an extremal at tau = 0: {rep0}")
    check_configuration(prob_family(target), target)
    path = HomotopyPath([HomotopyStep(0.0, zero, seed, rep0, True)], target)
    if target.is_zero:
        return path
    s, ds = 0.0, policy.initial_step
    streak = 0
    current = seed
    diagnostics = []
    while s < 1.0:
        s_new = min(1.0, s + ds)
        tau = target.scaled(s_new)
        prob = prob_family(tau)
        try:
            ext, rep = solve(prob, tau, _unknowns(prob, current), warm=current, cfg=policy.solve)
        except (NewtonStalled, SweepDiverged) as exc:
            path.steps.append(HomotopyStep(s_new, tau, None, None, False, str(exc)))
            diagnostics.append({"s": s_new, "tau": tau.as_tuple(), "error": str(exc)})
            streak = 0
            ds /= 2.0
            if ds < policy.min_step:
                raise HomotopyStuck(f"step size below {policy.min_step:g} after s = {s:g}",
                                    target.scaled(s), diagnostics, path)
            continue
        path.steps.append(HomotopyStep(s_new, tau, ext, rep, True))
        current, s = ext, s_new
        streak += 1
        if streak >= policy.grow_after:
            ds = min(2.0 * ds, policy.initial_step)
            streak = 0
    return path


# ----------------------------------------------------------------------
# Continuity metrics
# ----------------------------------------------------------------------
COLUMNS = ("s", "tau0", "tau1", "tau2", "sup_x", "sup_p", "dt_f", "weak_u", "strong_u")


@dataclass
class ContinuityReport:
    """Distances of each accepted extremal to the ``tau = 0`` one."""

    rows: list

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(r[c])) for c in COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "ContinuityReport":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            return cls([{k: float(v) for k, v in row.items()} for row in rd])


def _common_nodes(a: Extremal, b: Extremal, T: float) -> np.ndarray:
    """Nodes of the finer control grid on ``[0, T]``, endpoint included."""
    h = min(a.u.grid.h, b.u.grid.h)
    n = max(1, int(math.ceil(T / h - 1e-9)))
    return np.linspace(0.0, T, n + 1)


def _trapezoid(t: np.ndarray, f: np.ndarray) -> np.ndarray:
    w = np.empty_like(t)
    dt = np.diff(t)
    w[0], w[-1] = dt[0] / 2, dt[-1] / 2
    w[1:-1] = (dt[:-1] + dt[1:]) / 2
    return np.tensordot(w, f, axes=(0, 0))


def continuity_metrics(path: HomotopyPath, test_set_size: int = 8) -> ContinuityReport:
    """Compare each accepted step with the first one.

    Sup norms use the finer of the two meshes on ``[0, min(t_f0, t_f)]``;
    ``weak_u`` is the largest ``|int (u - u0) phi_j|`` over the first
    ``test_set_size`` Legendre polynomials rescaled to that interval, taken
    per control component.
    """
    if test_set_size < 1:
        raise ValueError("test_set_size must be positive")
    steps = path.accepted
    ref = steps[0].extremal
    rows = []
    for st in steps:
        ext = st.extremal
        T = min(ref.t_f, ext.t_f)
        t = _common_nodes(ref, ext, T)
        dx = np.max(np.abs(ext.x.sample(t) - ref.x.sample(t)))
        dp = np.max(np.abs(ext.p.sample(t) - ref.p.sample(t)))
        # control quadrature on a 4x refinement: u is only piecewise linear
        tq = np.linspace(0.0, T, 4 * (t.size - 1) + 1)
        du = ext.u.sample(tq) - ref.u.sample(tq)
        phi = legendre.legvander(2.0 * tq / T - 1.0, test_set_size - 1)       # (Q, J)
        weak = np.abs(_trapezoid(tq, du[:, :, None] * phi[:, None, :]))        # (m, J)
        strong = math.sqrt(max(float(_trapezoid(tq, np.sum(du * du, axis=1))), 0.0))
        tau = st.tau.as_tuple()
        rows.append({"s": st.s, "tau0": tau[0], "tau1": tau[1], "tau2": tau[2],
                     "sup_x": float(dx), "sup_p": float(dp), "dt_f": abs(ext.t_f - ref.t_f),
                     "weak_u": float(np.max(weak)), "strong_u": strong})
    return ContinuityReport(rows)
