"""Shooting solver for the delayed PMP boundary-value problem.

Unknowns are the initial adjoint ``p(0)`` and, for free final time, ``t_f``.
For a given guess the rest of the extremal is produced by one of two inner
solvers:

* problems whose state and control arguments are not delayed
  (``tau1 = tau2 = 0``; ``tau0`` only shifts explicit time) integrate state and
  adjoint forward together, synthesising the control at every stage;
* otherwise a damped forward-backward *sweep* iterates control synthesis,
  forward state integration and backward adjoint integration until a fixed
  point is reached.  The backward pass integrates a particular solution and
  a fundamental matrix so that ``p(0)`` can be pinned exactly.

Newton iterations use forward-difference Jacobians whose columns are
propagated together as one batch.

Control-affine problems with bang-bang or ball-normalised controls have a
discontinuous shooting map at singular extremals.  :func:`solve` can
therefore pass through a ladder of regularised problems (``eps |u|^2`` added
to the cost) before solving the original one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dde_integrator import (IntegratorConfig, NonFiniteState, Trajectories, backward_batch,
                             forward_batch)
from .ocp_model import GuinnReduction, OcpProblem, regularized
from .pmp_core import (TOL_SINGULAR, Extremal, ResidualReport, _affine_control, _resolve_mode,
                       maximality_values, residual_report, switching_function,
                       synthesize_control)
from .time_mesh import DelayVector, SampledFunction, TimeGrid

__all__ = [
    "SweepConfig",
    "SolveConfig",
    "ShootingUnknowns",
    "SweepDiverged",
    "NewtonStalled",
    "sweep",
    "shooting_residual",
    "solve",
    "uses_forward_mode",
    "check_configuration",
    "GuinnSolution",
    "solve_guinn",
]


class SweepDiverged(RuntimeError):
    """The forward-backward sweep did not reach its fixed-point tolerance."""

    def __init__(self, message: str, history: Sequence[float] = (), iterates: Sequence[dict] = ()) -> None:
        super().__init__(message)
        self.history = list(history)
        self.iterates = list(iterates)


class NewtonStalled(RuntimeError):
    """Newton shooting failed to reduce the residual below tolerance."""

    def __init__(self, message: str, best_residual: float = math.inf, trace: Sequence[float] = ()) -> None:
        super().__init__(message)
        self.best_residual = best_residual
        self.trace = list(trace)


@dataclass(frozen=True)
class SweepConfig:
    """Fixed-point iteration settings.

    ``damping`` is halved whenever the sweep defect grows and restored once it
    decreases again.  ``anderson`` is the Anderson mixing depth (0 disables
    it); its history is dropped whenever the defect grows.
    """

    max_sweeps: int = 300
    damping: float = 0.5
    tol_fixed_point: float = 1e-11
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    synthesis: str = "auto"
    lattice_size: int = 21
    record_iterates: bool = False
    anderson: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol_fixed_point > 0 or self.max_sweeps < 1:
            raise ValueError("sweep tolerances must be positive")


DEFAULT_REPORT_TOL = {
    "adjoint_defect": 1e-6,
    "maximality_defect": 1e-8,
    "transversality_defect": 1e-8,
    "free_time_defect": 1e-8,
    "boundary_defect": 1e-8,
}


@dataclass(frozen=True)
class SolveConfig:
    """Newton shooting settings.

    ``smoothing`` is the ladder of regularisation weights tried for
    bang-bang/ball problems (last entry must be 0); ``smoothing_mode`` is
    ``"auto"`` (ladder when no warm extremal is given, fallback otherwise),
    ``"always"`` or ``"never"``.
    """

    sweep: SweepConfig = field(default_factory=SweepConfig)
    tol: float = 1e-8
    max_iter: int = 30
    fd_step: float = 1e-6
    max_halvings: int = 8
    smoothing: tuple = (0.5, 0.1, 0.02, 0.0)
    smoothing_mode: str = "auto"
    report_tol: dict = field(default_factory=lambda: dict(DEFAULT_REPORT_TOL))
    state_bound: Optional[float] = None

    @property
    def integrator(self) -> IntegratorConfig:
        return self.sweep.integrator

    def with_step(self, h: float) -> "SolveConfig":
        return replace(self, sweep=replace(self.sweep, integrator=replace(self.sweep.integrator, h=h)))


@dataclass(frozen=True)
class ShootingUnknowns:
    """Initial adjoint and, for free final time, the final time."""

    p_init: np.ndarray
    t_f: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_init", np.atleast_1d(np.asarray(self.p_init, dtype=float)))
        if self.t_f is not None and not self.t_f > 0:
            raise ValueError("t_f must be positive")

    def as_vector(self) -> np.ndarray:
        return self.p_init.copy() if self.t_f is None else np.append(self.p_init, self.t_f)

    @classmethod
    def from_vector(cls, z, n: int, free: bool) -> "ShootingUnknowns":
        z = np.asarray(z, dtype=float)
        return cls(z[:n], float(z[n]) if free else None)


def check_configuration(prob: OcpProblem, tau: DelayVector) -> None:
    """Reject combinations the solver does not support."""
    if prob.free_time and tau.tau2 > 0:
        raise ValueError("free final time is only supported without control delay (tau2 = 0)")
    if tau.delta > prob.delta + 1e-12:
        raise ValueError(f"delay bound {tau.delta} exceeds the history length {prob.delta}")


def uses_forward_mode(tau: DelayVector) -> bool:
    return tau.tau1 == 0.0 and tau.tau2 == 0.0


# ----------------------------------------------------------------------
# Batch iterate
# ----------------------------------------------------------------------
@dataclass
class _Iterate:
    grid: TimeGrid
    x: Trajectories
    p: Trajectories
    u: Trajectories
    p0: np.ndarray
    sweeps: int = 0
    defects: list = field(default_factory=list)
    iterates: list = field(default_factory=list)

    def member(self, prob: OcpProblem, tau: DelayVector, b: int = 0, info: dict | None = None) -> Extremal:
        return Extremal(self.x.member(b), self.p.member(b), float(self.p0[b]),
                        self.u.member(b, prob.history_control), self.grid.t_end, tau,
                        dict(info or {}))

    def take(self, idx) -> "_Iterate":
        sel = lambda tr: Trajectories(tr.grid, tr.values[idx], tr.interp,
                                      None if tr.d0 is None else tr.d0[idx],
                                      None if tr.d1 is None else tr.d1[idx], tr.history)
        return _Iterate(self.grid, sel(self.x), sel(self.p), sel(self.u), self.p0[idx])


def _half_grid(grid: TimeGrid) -> TimeGrid:
    return TimeGrid(grid.t_start, grid.t_end, 2 * grid.n_steps)


def _tol_for(P: np.ndarray) -> np.ndarray:
    return TOL_SINGULAR * np.max(np.abs(P), axis=tuple(range(1, P.ndim)))


def _synthesize_batch(prob, tau, grid, x: Trajectories, p: Trajectories, p0, u_cur: Trajectories,
                      mode: str, lattice_size: int) -> np.ndarray:
    hg = _half_grid(grid)
    t = hg.nodes
    if mode == "grid-search":
        out = []
        lat = prob.control_set.lattice(lattice_size)
        for b in range(x.batch):
            vals = maximality_values(prob, tau, x.member(b), p.member(b), p0[b],
                                     u_cur.member(b, prob.history_control), grid.t_end, t, lat)
            out.append(lat[np.argmax(vals, axis=1)])
        return np.stack(out)
    phi, R = switching_function(prob, tau, x, p, p0, grid.t_end, t)
    tol = np.broadcast_to(_tol_for(p.values)[:, None], phi.shape[:2])
    u, _ = _affine_control(prob, mode, phi, R, tol)
    return u


def _initial_iterate(prob, tau, grid, warm: Extremal | None, p_init, B: int, bound) -> _Iterate:
    """Warm arrays resampled on ``grid`` in normalised time ``t / t_f``."""
    n = prob.state_dim
    hg = _half_grid(grid)
    if warm is not None:
        scale = warm.t_f / grid.t_end
        u_vals = warm.u.sample(np.minimum(hg.nodes * scale, warm.t_f), "right")
        p_vals = warm.p.sample(np.minimum(grid.nodes * scale, warm.t_f))
        p0 = warm.p0
    else:
        u_vals = np.tile(prob.control_set.center(), (hg.n_steps + 1, 1))
        p_vals = np.zeros((grid.n_steps + 1, n))
        p0 = -1.0
    p_vals = np.broadcast_to(p_vals, (B,) + p_vals.shape).copy()
    if p_init is not None:
        # shift each member so that it starts at its own p(0)
        p_vals += np.asarray(p_init, dtype=float).reshape(B, 1, n) - p_vals[:, :1]
    u = Trajectories(hg, np.broadcast_to(u_vals, (B,) + u_vals.shape).copy(), "linear",
                     history=prob.history_control)
    p = Trajectories(grid, p_vals, "linear")
    x = forward_batch(prob, tau, grid, u, "rk4", bound)
    return _Iterate(grid, x, p, u, np.full(B, p0))


class _Anderson:
    """Anderson mixing of the sweep map, one history per batch member.

    With depth 0 this is plain damped iteration ``v + alpha (G(v) - v)``.
    """

    def __init__(self, depth: int, batch: int) -> None:
        self.depth = depth
        self.batch = batch
        self.reset()

    def reset(self) -> None:
        self.V, self.R = [], []

    def step(self, cur: list, img: list, alpha: float) -> list:
        shapes = [a.shape[1:] for a in cur]
        sizes = [int(np.prod(sh)) for sh in shapes]
        v = np.concatenate([a.reshape(self.batch, -1) for a in cur], axis=1)
        g = np.concatenate([a.reshape(self.batch, -1) for a in img], axis=1)
        r = g - v
        out = v + alpha * r
        if self.depth > 0:
            self.V.append(v)
            self.R.append(r)
            if len(self.V) > self.depth + 1:
                self.V.pop(0)
                self.R.pop(0)
            if len(self.V) > 1:
                dV = np.stack([self.V[i + 1] - self.V[i] for i in range(len(self.V) - 1)], axis=2)
                dR = np.stack([self.R[i + 1] - self.R[i] for i in range(len(self.R) - 1)], axis=2)
                for b in range(self.batch):
                    gam = np.linalg.lstsq(dR[b], r[b], rcond=1e-10)[0]
                    out[b] = v[b] - dV[b] @ gam + alpha * (r[b] - dR[b] @ gam)
        parts, k = [], 0
        for sh, sz in zip(shapes, sizes):
            parts.append(out[:, k:k + sz].reshape((self.batch,) + sh))
            k += sz
        return parts


def _sweep_loop(prob, tau, it: _Iterate, cfg: SweepConfig, anchor: str, target: np.ndarray,
                bound) -> _Iterate:
    """Damped fixed-point iteration; ``anchor`` is "terminal" or "initial"."""
    n = prob.state_dim
    grid = it.grid
    B = it.x.batch
    mode = _resolve_mode(prob, cfg.synthesis)
    scheme = cfg.integrator.scheme
    alpha0 = cfg.damping
    alpha = alpha0
    x, p, u = it.x, it.p, it.u
    p0 = it.p0
    if anchor == "terminal":
        pT = target.reshape(B, n, 1)
    else:
        pT = np.zeros((B, n, n + 1))
        pT[:, :, 1:] = np.eye(n)
    history = []
    iterates = []
    last = math.inf
    acc = _Anderson(cfg.anderson, B)
    for k in range(1, cfg.max_sweeps + 1):
        u_c = _synthesize_batch(prob, tau, grid, x, p, p0, u, mode, cfg.lattice_size)
        u_tr = Trajectories(u.grid, u_c, "linear", history=prob.history_control)
        x_new = forward_batch(prob, tau, grid, u_tr, scheme, bound)
        if anchor == "terminal":
            if not np.all(p0 == p0[0]):
                raise ValueError("terminal sweep needs a common p0")
            P, D0, D1 = backward_batch(prob, tau, grid, x_new, u_tr, pT, np.array([p0[0]]), scheme)
            Pv, Pd0, Pd1 = P[..., 0], D0[..., 0], D1[..., 0]
        else:
            w = np.zeros(n + 1)
            w[0] = p0[0]
            P, D0, D1 = backward_batch(prob, tau, grid, x_new, u_tr, pT, w, scheme)
            M = P[:, 0, :, 1:]                                   # (B, n, n)
            rhs = target - P[:, 0, :, 0]
            c = np.stack([np.linalg.lstsq(M[b], rhs[b], rcond=None)[0] for b in range(B)])
            coef = np.concatenate([np.ones((B, 1)), c], axis=1)  # (B, n+1)
            Pv = np.einsum("bknc,bc->bkn", P, coef)
            Pd0 = np.einsum("bknc,bc->bkn", D0, coef)
            Pd1 = np.einsum("bknc,bc->bkn", D1, coef)
            Pv[:, 0] = target
        dp = np.max(np.abs(Pv - p.values), axis=(1, 2))
        du = np.max(np.abs(u_c - u.values), axis=(1, 2))
        defect = float(np.max(dp + du))
        history.append(defect)
        if cfg.record_iterates:
            iterates.append({"x": x, "p": p, "u": u_c, "p0": p0.copy()})
        p_cand = Trajectories(grid, Pv, "cubic", Pd0, Pd1)
        if defect < cfg.tol_fixed_point:
            out = _Iterate(grid, x_new, p_cand, u_tr, p0, k, history, iterates)
            return out
        if not np.isfinite(defect):
            raise SweepDiverged("non-finite sweep defect", history, iterates)
        if defect > last:
            alpha = max(alpha / 2.0, alpha0 / 64.0)
            acc.reset()
        else:
            alpha = alpha0
        last = defect
        cur = [p.values, p.d0 if p.interp == "cubic" else Pd0, p.d1 if p.interp == "cubic" else Pd1, u.values]
        new = acc.step(cur, [Pv, Pd0, Pd1, u_c], alpha)
        p = Trajectories(grid, new[0], "cubic", new[1], new[2])
        u = Trajectories(u.grid, new[3], "linear", history=prob.history_control)
        x = x_new
    raise SweepDiverged(f"sweep defect {history[-1]:.3e} after {cfg.max_sweeps} sweeps", history, iterates)


def sweep(prob: OcpProblem, tau: DelayVector, warm: Extremal, cfg: SweepConfig | None = None,
          bound: float | None = None) -> Extremal:
    """Forward-backward sweep keeping ``warm``'s terminal adjoint fixed.

    Returns the fixed point as an :class:`Extremal` whose ``info`` holds the
    defect history (and the iterates when ``cfg.record_iterates``).

    Raises
    ------
    SweepDiverged
        When the defect is still above ``cfg.tol_fixed_point`` after
        ``cfg.max_sweeps`` iterations.
    """
    cfg = cfg or SweepConfig()
    check_configuration(prob, tau)
    grid = cfg.integrator.grid(warm.t_f, tau)
    it = _initial_iterate(prob, tau, grid, warm, None, 1, bound)
    it.p = Trajectories(grid, it.p.values, "linear")
    pT = warm.p.eval(warm.t_f, "left")[None]
    it.p0 = np.array([warm.p0])
    out = _sweep_loop(prob, tau, it, cfg, "terminal", pT, bound)
    return out.member(prob, tau, 0, {"sweeps": out.sweeps, "sweep_defects": out.defects,
                                     "iterates": out.iterates})


# ----------------------------------------------------------------------
# Forward mode (no sampled delays)
# ----------------------------------------------------------------------
def _stage_control(prob, mode, t, s, x, p, p0, tol, lattice):
    """Maximiser of ``H(t, s, x, x, p, p0, w, w)`` for a batch of points."""
    if mode == "grid-search":
        B, L = x.shape[0], lattice.shape[0]
        rep = lambda a: np.repeat(a, L, axis=0)
        tt = np.repeat(np.broadcast_to(t, (B,)), L)
        ss = np.repeat(np.broadcast_to(s, (B,)), L)
        W = np.tile(lattice, (B, 1))
        f = prob.f_batch(tt, ss, rep(x), rep(x), W, W)
        f0 = prob.f0_batch(tt, ss, rep(x), rep(x), W, W)
        val = (np.einsum("ki,ki->k", rep(p), f) + np.repeat(p0, L) * f0).reshape(B, L)
        return lattice[np.argmax(val, axis=1)]
    aff = prob.affine
    M = aff.f1(t, s, x, x) + aff.f2(t, s, x, x)
    c = aff.cost_u(t, s, x, x) + aff.cost_v(t, s, x, x)
    phi = np.einsum("bim,bi->bm", M, p) + p0[:, None] * c
    R = -p0 * (aff.ru + aff.rv)
    u, _ = _affine_control(prob, mode, phi, R, tol)
    return u


def _forward_mode(prob: OcpProblem, tau: DelayVector, Z: np.ndarray, n_steps: int,
                  cfg: SweepConfig, bound) -> dict:
    """Integrate state and adjoint together from ``(phi1(0), p(0))`` for a batch of guesses."""
    n = prob.state_dim
    B = Z.shape[0]
    free = prob.free_time
    tf = Z[:, n] if free else np.full(B, prob.final_time)
    N = n_steps
    h = tf / N
    mode = _resolve_mode(prob, cfg.synthesis)
    lattice = prob.control_set.lattice(cfg.lattice_size) if mode == "grid-search" else None
    p0 = np.full(B, -1.0)
    tau0 = tau.tau0
    rk4 = cfg.integrator.scheme == "rk4"
    hc = h[:, None]

    direct = prob.vectorized and prob.jac_x is not None and prob.jac_y is not None

    def control(t, x, p, pmax):
        return _stage_control(prob, mode, t, t - tau0, x, p, p0, TOL_SINGULAR * pmax, lattice)

    def rhs(t, x, p, u):
        s = t - tau0
        if direct:
            f = prob.dynamics(t, s, x, x, u, u)
            J = prob.jac_x(t, s, x, x, u, u) + prob.jac_y(t, s, x, x, u, u)
        else:
            tb, sb = np.broadcast_to(t, (B,)), np.broadcast_to(s, (B,))
            f = prob.f_batch(tb, sb, x, x, u, u)
            jac = prob.jacobians_batch(tb, sb, x, x, u, u, "xy")
            J = jac["x"] + jac["y"]
        dp = -(np.einsum("bij,bi->bj", J[:, :n], p) + p0[:, None] * J[:, n])
        return f, dp

    X = np.empty((B, N + 1, n))
    P = np.empty((B, N + 1, n))
    DX = np.empty((B, N + 1, n))
    DP = np.empty((B, N + 1, n))
    U = np.empty((B, 2 * N + 1, prob.control_dim))
    X[:, 0] = prob.history_state.eval(0.0)
    P[:, 0] = Z[:, :n]
    pmax = np.max(np.abs(P[:, 0]), axis=1)
    t = np.zeros(B)
    U[:, 0] = control(t, X[:, 0], P[:, 0], pmax)
    fx, fp = rhs(t, X[:, 0], P[:, 0], U[:, 0])
    for k in range(N):
        x, p = X[:, k], P[:, k]
        DX[:, k], DP[:, k] = fx, fp
        tm = t + 0.5 * h
        if rk4:
            # predictor: classical RK4 with stage-wise controls
            xm, pm = x + 0.5 * hc * fx, p + 0.5 * hc * fp
            a_x, a_p = rhs(tm, xm, pm, control(tm, xm, pm, pmax))
            xb, pb = x + 0.5 * hc * a_x, p + 0.5 * hc * a_p
            b_x, b_p = rhs(tm, xb, pb, control(tm, xb, pb, pmax))
            xe, pe = x + hc * b_x, p + hc * b_p
            c_x, c_p = rhs(tm + 0.5 * h, xe, pe, control(t + h, xe, pe, pmax))
            xn = x + hc / 6.0 * (fx + 2 * a_x + 2 * b_x + c_x)
            pn = p + hc / 6.0 * (fp + 2 * a_p + 2 * b_p + c_p)
            # corrector: controls taken from the Hermite midpoint and the new
            # node, then frozen; the stored half-grid control is exactly the
            # one that was integrated
            ue = control(t + h, xn, pn, pmax)
            gx, gp = rhs(t + h, xn, pn, ue)
            xm = 0.5 * (x + xn) + hc / 8.0 * (fx - gx)
            pm = 0.5 * (p + pn) + hc / 8.0 * (fp - gp)
            um = control(tm, xm, pm, pmax)
            a_x, a_p = rhs(tm, x + 0.5 * hc * fx, p + 0.5 * hc * fp, um)
            b_x, b_p = rhs(tm, x + 0.5 * hc * a_x, p + 0.5 * hc * a_p, um)
            c_x, c_p = rhs(t + h, x + hc * b_x, p + hc * b_p, ue)
            xn = x + hc / 6.0 * (fx + 2 * a_x + 2 * b_x + c_x)
            pn = p + hc / 6.0 * (fp + 2 * a_p + 2 * b_p + c_p)
        else:
            xe, pe = x + hc * fx, p + hc * fp
            ue = control(t + h, xe, pe, pmax)
            c_x, c_p = rhs(t + h, xe, pe, ue)
            xn = x + 0.5 * hc * (fx + c_x)
            pn = p + 0.5 * hc * (fp + c_p)
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(pn))):
            raise NonFiniteState("forward shooting produced non-finite values")
        if bound is not None and np.max(np.abs(xn)) > bound:
            raise NonFiniteState(f"state left the bound {bound:g}")
        X[:, k + 1], P[:, k + 1] = xn, pn
        pmax = np.maximum(pmax, np.max(np.abs(pn), axis=1))
        t = (k + 1) * h if k + 1 < N else tf.copy()
        un = ue
        U[:, 2 * k + 2] = un
        U[:, 2 * k + 1] = um if rk4 else 0.5 * (U[:, 2 * k] + un)
        fx, fp = rhs(t, xn, pn, un)
    DX[:, N], DP[:, N] = fx, fp
    return {"X": X, "P": P, "DX": DX, "DP": DP, "U": U, "tf": tf, "p0": p0}


def _forward_mode_iterate(prob, tau, data: dict, b: int, cfg: SweepConfig) -> Extremal:
    N = data["X"].shape[1] - 1
    grid = TimeGrid(0.0, float(data["tf"][b]), N)
    DX, DP = data["DX"][b], data["DP"][b]
    x = SampledFunction(grid, data["X"][b], "cubic", (DX[:-1], DX[1:]), history=prob.history_state)
    p = SampledFunction(grid, data["P"][b], "cubic", (DP[:-1], DP[1:]))
    syn = synthesize_control(prob, tau, x, p, -1.0, grid.t_end, cfg.synthesis,
                             lattice_size=cfg.lattice_size)
    u = SampledFunction(syn.u.grid, data["U"][b], "linear", history=prob.history_control)
    return Extremal(x, p, -1.0, u, grid.t_end, tau,
                    {"singular_arcs": syn.singular_arcs, "sweeps": 1, "sweep_defects": [0.0]})


# ----------------------------------------------------------------------
# Shooting
# ----------------------------------------------------------------------
def _residual_from_arrays(prob, tau, xf, pf, ham) -> np.ndarray:
    tgt = prob.target
    parts = [xf @ tgt.A.T - tgt.b, pf @ tgt.tangent_basis()]
    if prob.free_time:
        parts.append(ham[:, None])
    return np.concatenate(parts, axis=1)


def _final_hamiltonian(prob, tau, x: Trajectories, p: Trajectories, u: Trajectories, p0) -> np.ndarray:
    tf = x.grid.t_end
    X = x.at(np.array([tf]), "left")[:, 0]
    Y = x.at(np.array([tf - tau.tau1]), "left")[:, 0]
    U = u.at(np.array([tf]), "left")[:, 0]
    V = u.at(np.array([tf - tau.tau2]), "left")[:, 0]
    P = p.values[:, -1]
    f = prob.f_batch(tf, tf - tau.tau0, X, Y, U, V)
    f0 = prob.f0_batch(tf, tf - tau.tau0, X, Y, U, V)
    return np.einsum("bi,bi->b", P, f) + p0 * f0


class _Shooter:
    """Evaluates the shooting map for batches of unknowns and remembers the last iterate."""

    def __init__(self, prob: OcpProblem, tau: DelayVector, cfg: SolveConfig, warm: Extremal | None,
                 n_steps: int | None = None) -> None:
        self.prob = prob
        self.tau = tau
        self.cfg = cfg
        self.warm = warm
        self.bound = cfg.state_bound if cfg.state_bound is not None else prob.state_bound
        self.forward = uses_forward_mode(tau)
        t_ref = prob.final_time if not prob.free_time else (warm.t_f if warm is not None else 1.0)
        self.n_steps = n_steps or cfg.integrator.grid(t_ref, tau).n_steps
        self.base: _Iterate | None = None
        self.data = None
        self.sweeps = 0

    def grid(self, tf: float) -> TimeGrid:
        g = TimeGrid(0.0, tf, self.n_steps)
        self.cfg.integrator.check_grid(g, self.tau)
        return g

    def evaluate(self, Z: np.ndarray, keep: bool = False) -> np.ndarray:
        """Residuals ``(B, dim)`` for unknowns ``Z`` of shape ``(B, dim)``."""
        prob, tau = self.prob, self.tau
        if self.forward:
            data = _forward_mode(prob, tau, Z, self.n_steps, self.cfg.sweep, self.bound)
            xf, pf = data["X"][:, -1], data["P"][:, -1]
            ham = None
            if prob.free_time:
                ham = self._ham_forward(data)
            if keep:
                self.data = data
            return _residual_from_arrays(prob, tau, xf, pf, ham)
        if prob.free_time:
            return np.concatenate([self._evaluate_sweep(Z[b:b + 1], keep and b == 0) for b in range(Z.shape[0])])
        return self._evaluate_sweep(Z, keep)

    def _ham_forward(self, data) -> np.ndarray:
        prob, tau = self.prob, self.tau
        X, P, tf, p0 = data["X"][:, -1], data["P"][:, -1], data["tf"], data["p0"]
        mode = _resolve_mode(prob, self.cfg.sweep.synthesis)
        lattice = prob.control_set.lattice(self.cfg.sweep.lattice_size) if mode == "grid-search" else None
        pmax = np.max(np.abs(data["P"]), axis=(1, 2))
        s = tf - tau.tau0
        u = _stage_control(prob, mode, tf, s, X, P, p0, TOL_SINGULAR * pmax, lattice)
        f = prob.f_batch(tf, s, X, X, u, u)
        f0 = prob.f0_batch(tf, s, X, X, u, u)
        return np.einsum("bi,bi->b", P, f) + p0 * f0

    def _evaluate_sweep(self, Z: np.ndarray, keep: bool) -> np.ndarray:
        prob, tau = self.prob, self.tau
        n = prob.state_dim
        B = Z.shape[0]
        tf = float(Z[0, n]) if prob.free_time else prob.final_time
        grid = self.grid(tf)
        if self.base is not None and self.base.grid.n_steps == grid.n_steps:
            base = self.base.take(np.zeros(B, dtype=int))
            base.grid = grid
            base.x = Trajectories(grid, base.x.values, "cubic", base.x.d0, base.x.d1, base.x.history)
            base.p = Trajectories(grid, base.p.values, "cubic", base.p.d0, base.p.d1)
            base.u = Trajectories(_half_grid(grid), base.u.values, "linear", history=prob.history_control)
        else:
            base = _initial_iterate(prob, tau, grid, self.warm, None, 1, self.bound).take(np.zeros(B, dtype=int))
        it = _sweep_loop(prob, tau, base, self.cfg.sweep, "initial", Z[:, :n], self.bound)
        self.sweeps += it.sweeps
        if keep:
            self.base = it.take(np.array([0]))
        ham = _final_hamiltonian(prob, tau, it.x, it.p, it.u, it.p0) if prob.free_time else None
        return _residual_from_arrays(prob, tau, it.x.values[:, -1], it.p.values[:, -1], ham)

    def extremal(self, info: dict) -> Extremal:
        if self.forward:
            ext = _forward_mode_iterate(self.prob, self.tau, self.data, 0, self.cfg.sweep)
            ext.info.update(info)
            return ext
        return self.base.member(self.prob, self.tau, 0, dict(info, sweeps=self.sweeps,
                                                             sweep_defects=self.base.defects))


def shooting_residual(prob: OcpProblem, tau: DelayVector, unk: ShootingUnknowns,
                      warm: Extremal | None = None, cfg: SolveConfig | None = None) -> np.ndarray:
    """Boundary, transversality and (free time) Hamiltonian defects for ``unk``.

    The residual has the same dimension as the unknowns.
    """
    cfg = cfg or SolveConfig()
    check_configuration(prob, tau)
    _check_unknowns(prob, unk)
    return _Shooter(prob, tau, cfg, warm).evaluate(unk.as_vector()[None])[0]


def _check_unknowns(prob, unk: ShootingUnknowns) -> None:
    if unk.p_init.size != prob.state_dim:
        raise ValueError("p_init has the wrong dimension")
    if prob.free_time and unk.t_f is None:
        raise ValueError("free final time needs a t_f guess")
    if not prob.free_time and unk.t_f is not None:
        raise ValueError("t_f given for a fixed-time problem")


def _newton(shooter: _Shooter, z0: np.ndarray, cfg: SolveConfig) -> tuple[np.ndarray, list, int]:
    n = shooter.prob.state_dim
    free = shooter.prob.free_time

    def F(Z, keep=False):
        if free and np.any(Z[:, n] <= 0):
            return np.full((Z.shape[0], Z.shape[1]), np.inf)
        try:
            return shooter.evaluate(Z, keep)
        except (NonFiniteState, SweepDiverged, FloatingPointError):
            return np.full((Z.shape[0], Z.shape[1]), np.inf)

    z = np.asarray(z0, dtype=float)
    r = F(z[None], keep=True)[0]
    norm = float(np.linalg.norm(r))
    trace = [norm]
    if not np.isfinite(norm):
        raise NewtonStalled("initial guess gives a non-finite residual", norm, trace)
    iters = 0
    while norm >= cfg.tol:
        if iters >= cfg.max_iter:
            raise NewtonStalled(f"no convergence in {cfg.max_iter} iterations (residual {norm:.3e})",
                                min(trace), trace)
        iters += 1
        steps = cfg.fd_step * np.maximum(1.0, np.abs(z))
        Zp = z[None] + np.diag(steps)
        Rp = F(Zp)
        if not np.all(np.isfinite(Rp)):
            raise NewtonStalled("non-finite finite-difference column", min(trace), trace)
        J = (Rp - r[None]).T / steps[None]
        dz = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        for _ in range(cfg.max_halvings + 1):
            z_try = z + lam * dz
            r_try = F(z_try[None], keep=True)[0]
            n_try = float(np.linalg.norm(r_try))
            if np.isfinite(n_try) and n_try < (1.0 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
        else:
            # leave the shooter at the best point found
            F(z[None], keep=True)
            raise NewtonStalled(f"line search failed at residual {norm:.3e}", min(trace), trace)
        z, r, norm = z_try, r_try, n_try
        trace.append(norm)
    return z, trace, iters


def _needs_smoothing(prob: OcpProblem, cfg: SolveConfig) -> bool:
    if prob.affine is None or prob.affine.ru > 0 or prob.affine.rv > 0:
        return False
    return _resolve_mode(prob, cfg.sweep.synthesis) in ("affine-ball", "affine-box")


def solve(prob: OcpProblem, tau: DelayVector, initial_guess: ShootingUnknowns,
          warm: Extremal | None = None, cfg: SolveConfig | None = None) -> tuple[Extremal, ResidualReport]:
    """Normal extremal (``p0 = -1``) by Newton shooting on ``p(0)`` (and ``t_f``).

    Returns the extremal and its :class:`ResidualReport`; the report is
    checked against ``cfg.report_tol`` before returning.

    Raises
    ------
    NewtonStalled
        No root found, or the converged extremal fails its own report.
    ValueError
        Unsupported configuration (free final time with a control delay).
    """
    cfg = cfg or SolveConfig()
    check_configuration(prob, tau)
    _check_unknowns(prob, initial_guess)
    if cfg.smoothing and cfg.smoothing[-1] != 0:
        raise ValueError("the smoothing ladder must end at 0")
    z = initial_guess.as_vector()
    ladder = [0.0]
    smoothing = _needs_smoothing(prob, cfg) and cfg.smoothing_mode != "never"
    if smoothing and (cfg.smoothing_mode == "always" or warm is None):
        ladder = list(cfg.smoothing)
    traces = []
    iters_total = 0
    shooter = None
    try:
        for eps in ladder:
            sub = regularized(prob, eps) if eps > 0 else prob
            shooter = _Shooter(sub, tau, cfg, warm, n_steps=shooter.n_steps if shooter else None)
            z, trace, iters = _newton(shooter, z, cfg)
            traces.append({"smoothing": eps, "residuals": trace})
            iters_total += iters
            warm = shooter.extremal({})
    except NewtonStalled:
        if ladder != [0.0] or not smoothing:
            raise
        return solve(prob, tau, initial_guess, None, replace(cfg, smoothing_mode="always"))
    info = {"newton_iterations": iters_total, "trace": traces, "unknowns": z.tolist()}
    ext = shooter.extremal(info)
    report = residual_report(prob, tau, ext, cfg.sweep.lattice_size)
    ext.info["report"] = report
    if not report.within(cfg.report_tol):
        raise NewtonStalled(f"converged extremal fails its residual report: {report}",
                            float(np.linalg.norm(traces[-1]["residuals"][-1])),
                            traces[-1]["residuals"])
    return ext, report


# ----------------------------------------------------------------------
# Stacked (Guinn) problems
# ----------------------------------------------------------------------
@dataclass
class GuinnSolution:
    """Extremal of a stacked problem; block values live on ``[0, tau2]``.

    ``x``, ``p`` and ``u`` map original times ``t in [0, t_f]`` back to
    block ``i = floor(t / tau2)`` at reduced time ``t - i tau2``.
    """

    reduction: GuinnReduction
    X: SampledFunction
    P: SampledFunction
    U: SampledFunction
    newton_iterations: int
    residual: float

    def _unstack(self, F: SampledFunction, times, d: int) -> np.ndarray:
        T, nb = self.reduction.block_horizon, self.reduction.n_blocks
        t = np.atleast_1d(np.asarray(times, dtype=float))
        i = np.minimum(np.floor(t / T + 1e-12).astype(int), nb - 1)
        r = np.clip(t - i * T, 0.0, T)
        vals = F.sample(r)
        cols = i[:, None] * d + np.arange(d)[None, :]
        return np.take_along_axis(vals, cols, axis=1)

    def x(self, times) -> np.ndarray:
        return self._unstack(self.X, times, self.reduction.original.state_dim)

    def p(self, times) -> np.ndarray:
        return self._unstack(self.P, times, self.reduction.original.state_dim)

    def u(self, times) -> np.ndarray:
        return self._unstack(self.U, times, self.reduction.original.control_dim)


def _guinn_flow(red: GuinnReduction, Z: np.ndarray, n_steps: int):
    """Integrate stacked state and adjoint from the unknowns ``Z`` (batch first).

    ``Z`` holds every block's initial adjoint followed by the initial states
    of blocks ``1..N``.  The gate of the last block switches off inside one
    cell at most; that cell is split there.
    """
    orig, aff = red.original, red.original.affine
    n, m, nb, T = orig.state_dim, orig.control_dim, red.n_blocks, red.block_horizon
    tau0 = red.tau.tau0
    t_f = orig.final_time
    U_set = orig.control_set
    B = Z.shape[0]
    p0 = -1.0
    phi2 = orig.history_control

    def gate(i, rc):
        return i < nb and rc + i * T <= t_f + 1e-12

    def control(r, rc, X, P):
        Xb, Pb = X.reshape(B, nb, n), P.reshape(B, nb, n)
        U = np.empty((B, nb, m))
        for j in range(nb):
            phi = np.zeros((B, m))
            q = 0.0
            if gate(j, rc):
                tj = np.full(B, r + j * T)
                a = (tj, tj - tau0, Xb[:, j], Xb[:, j])
                phi += np.einsum("bnm,bn->bm", aff.f1(*a), Pb[:, j]) + p0 * aff.cost_u(*a)
                q -= p0 * aff.ru
            if gate(j + 1, rc):
                tn = np.full(B, r + (j + 1) * T)
                a = (tn, tn - tau0, Xb[:, j + 1], Xb[:, j + 1])
                phi += np.einsum("bnm,bn->bm", aff.f2(*a), Pb[:, j + 1]) + p0 * aff.cost_v(*a)
                q -= p0 * aff.rv
            U[:, j] = U_set.project(phi / (2.0 * q)) if q > 0 else U_set.center()
        return U

    def rhs(r, rc, X, P):
        U = control(r, rc, X, P)
        Xb, Pb = X.reshape(B, nb, n), P.reshape(B, nb, n)
        dX, dP = np.zeros_like(Xb), np.zeros_like(Pb)
        for i in range(nb):
            if not gate(i, rc):
                continue
            ti = np.full(B, r + i * T)
            lag = phi2.sample(ti - T, "right") if i == 0 else U[:, i - 1]
            args = (ti, ti - tau0, Xb[:, i], Xb[:, i], U[:, i], lag)
            dX[:, i] = orig.f_batch(*args)
            J = orig.jacobians_batch(*args, which="xy")
            Jx = J["x"] + J["y"]
            dP[:, i] = -(np.einsum("bkn,bk->bn", Jx[:, :n], Pb[:, i]) + p0 * Jx[:, n])
        return dX.reshape(B, -1), dP.reshape(B, -1), U.reshape(B, -1)

    grid = TimeGrid(0.0, T, n_steps)
    r_gate = t_f - (nb - 1) * T
    Xs = np.empty((B, n_steps + 1, nb * n))
    Ps = np.empty_like(Xs)
    Us = np.empty((B, n_steps + 1, nb * m))
    X = np.zeros((B, nb * n))
    X[:, :n] = orig.history_state.eval(0.0)
    X[:, n:] = Z[:, nb * n:]
    P = Z[:, :nb * n].copy()
    Xs[:, 0], Ps[:, 0] = X, P
    for k in range(n_steps):
        a, b = grid.nodes[k], grid.nodes[k + 1]
        cuts = [a, r_gate, b] if a < r_gate < b else [a, b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            h, rc = hi - lo, 0.5 * (lo + hi)
            k1x, k1p, u1 = rhs(lo, rc, X, P)
            if lo == a:
                Us[:, k] = u1
            k2x, k2p, _ = rhs(lo + h / 2, rc, X + h / 2 * k1x, P + h / 2 * k1p)
            k3x, k3p, _ = rhs(lo + h / 2, rc, X + h / 2 * k2x, P + h / 2 * k2p)
            k4x, k4p, u4 = rhs(hi, rc, X + h * k3x, P + h * k3p)
            X = X + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            P = P + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        Xs[:, k + 1], Ps[:, k + 1] = X, P
        Us[:, k + 1] = rhs(b, 0.5 * (a + b), X, P)[2]
    return grid, Xs, Ps, Us


def _guinn_residual(red: GuinnReduction, Z: np.ndarray, Xs, Ps) -> np.ndarray:
    n, nb = red.original.state_dim, red.n_blocks
    target = red.original.target
    X0, XT, PT = Xs[:, 0].reshape(-1, nb, n), Xs[:, -1].reshape(-1, nb, n), Ps[:, -1].reshape(-1, nb, n)
    P0 = Z[:, :nb * n].reshape(-1, nb, n)
    link_x = (X0[:, 1:] - XT[:, :-1]).reshape(Z.shape[0], -1)
    link_p = (PT[:, :-1] - P0[:, 1:]).reshape(Z.shape[0], -1)
    end_x = XT[:, -1] @ target.A.T - target.b
    end_p = PT[:, -1] @ target.tangent_basis()
    return np.hstack([link_x, link_p, end_x, end_p])


def solve_guinn(red: GuinnReduction, cfg: SolveConfig | None = None, z0=None) -> GuinnSolution:
    """Normal extremal of a stacked pure-control-delay problem by shooting.

    Unknowns are the initial adjoints of all blocks and the initial states of
    blocks ``1..N``; residuals are the state and adjoint linkages between
    consecutive blocks and the endpoint conditions of the last block.  The
    control cost must be strictly convex (``ru > 0``) so the stacked
    maximisation has a closed form.
    """
    cfg = cfg or SolveConfig()
    orig = red.original
    if orig.affine is None or orig.affine.ru <= 0:
        raise ValueError("solve_guinn needs an affine problem with a positive quadratic control weight")
    n, nb = orig.state_dim, red.n_blocks
    dim = nb * n + (nb - 1) * n
    n_steps = max(4, int(math.ceil(red.block_horizon / cfg.integrator.h - 1e-9)))
    z = np.zeros(dim) if z0 is None else np.asarray(z0, dtype=float).copy()
    step = cfg.fd_step
    for it in range(cfg.max_iter + 1):
        Z = np.vstack([z, z + step * np.eye(dim)])
        _, Xs, Ps, _ = _guinn_flow(red, Z, n_steps)
        R = _guinn_residual(red, Z, Xs, Ps)
        r = R[0]
        if np.linalg.norm(r) < cfg.tol:
            break
        if it == cfg.max_iter:
            raise NewtonStalled(f"stacked shooting: no convergence in {cfg.max_iter} iterations",
                                float(np.linalg.norm(r)))
        J = (R[1:] - r).T / step
        z = z + np.linalg.lstsq(J, -r, rcond=None)[0]
    grid, Xs, Ps, Us = _guinn_flow(red, z[None], n_steps)
    return GuinnSolution(red, SampledFunction(grid, Xs[0]), SampledFunction(grid, Ps[0]),
                         SampledFunction(grid, Us[0]), it, float(np.linalg.norm(r)))
