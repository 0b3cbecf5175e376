"""Extremals, control synthesis from the maximality condition, and PMP residuals.

With ``H = <p, f> + p0 f0`` the control enters the maximality condition twice:
as ``u`` in ``H`` at time ``t`` and as the lagged argument ``v`` in ``H`` at
``t + tau2`` (only while ``t + tau2 <= t_f``).  For control-affine problems
both pieces are linear in the control up to the quadratic weights, and the
maximiser is a function of the *switching function*

    Phi(t) = dH/du(t) + 1[t + tau2 <= t_f] dH/dv(t + tau2)

and of ``R(t) = -p0 (ru + 1[t + tau2 <= t_f] rv)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dde_integrator import IntegratorConfig, Trajectories, integrate_adjoint
from .ocp_model import OcpProblem, Target
from .time_mesh import DelayVector, SampledFunction, TimeGrid, time_eps

__all__ = [
    "Extremal",
    "ResidualReport",
    "SingularArc",
    "ControlSynthesis",
    "TOL_SINGULAR",
    "switching_function",
    "synthesize_control",
    "maximality_values",
    "maximality_defect",
    "transversality_residual",
    "transversality_coordinates",
    "free_time_residual",
    "adjoint_defect",
    "residual_report",
]

TOL_SINGULAR = 1e-9
SYNTHESIS_MODES = ("auto", "affine-ball", "affine-box", "quadratic-regularized", "grid-search")


@dataclass(eq=False)
class Extremal:
    """Candidate Pontryagin extremal ``(x, p, p0, u)`` on ``[0, t_f]``.

    ``x`` and ``u`` carry their histories, so they answer queries on
    ``[-delta, t_f]``.  ``info`` holds solver diagnostics.
    """

    x: SampledFunction
    p: SampledFunction
    p0: float
    u: SampledFunction
    t_f: float
    tau: DelayVector
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.p0 > 0:
            raise ValueError("p0 must be nonpositive")
        if np.max(np.abs(self.p.values)) + abs(self.p0) == 0:
            raise ValueError("(p, p0) must be nontrivial")

    @property
    def normal(self) -> bool:
        return self.p0 != 0.0

    def resample(self, grid: TimeGrid) -> dict:
        """Node values of ``x``, ``p``, ``u`` on another grid over ``[0, t_f]``."""
        t = grid.nodes
        return {"t": t, "x": self.x.sample(t), "p": self.p.sample(t), "u": self.u.sample(t)}

    def to_csv(self, path) -> None:
        """Columns ``t, x_1..x_n, p_1..p_n, u_1..u_m`` on the control grid."""
        grid = self.u.grid
        t = grid.nodes
        n, m = self.x.dim, self.u.dim
        data = np.hstack([self.x.sample(t), self.p.sample(t), self.u.values])
        names = [f"x_{i + 1}" for i in range(n)] + [f"p_{i + 1}" for i in range(n)] \
            + [f"u_{i + 1}" for i in range(m)]
        SampledFunction(grid, data, "linear").to_csv(path, names)

    @classmethod
    def from_csv(cls, path, prob: OcpProblem, tau: DelayVector, p0: float = -1.0) -> "Extremal":
        """Inverse of :meth:`to_csv`; raises ``ValueError`` on malformed files."""
        f, names = SampledFunction.from_csv(path)
        n, m = prob.state_dim, prob.control_dim
        expect = [f"x_{i + 1}" for i in range(n)] + [f"p_{i + 1}" for i in range(n)] \
            + [f"u_{i + 1}" for i in range(m)]
        if names != expect:
            raise ValueError(f"{path}: expected columns {expect}, got {names}")
        v = f.values
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{path}: non-finite entries")
        grid = f.grid
        if grid.t_start != 0.0:
            raise ValueError(f"{path}: time column must start at 0")
        x = SampledFunction(grid, v[:, :n], "cubic", history=prob.history_state)
        p = SampledFunction(grid, v[:, n:2 * n], "cubic")
        u = SampledFunction(grid, v[:, 2 * n:], "linear", history=prob.history_control)
        return cls(x, p, p0, u, grid.t_end, tau)


@dataclass
class ResidualReport:
    """Sup-norm defects of the PMP conditions for one extremal."""

    adjoint_defect: float
    maximality_defect: float
    transversality_defect: float
    free_time_defect: float
    boundary_defect: float

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResidualReport":
        return cls(**json.loads(text))

    def within(self, tol: dict) -> bool:
        return all(getattr(self, k) <= v for k, v in tol.items())


@dataclass(frozen=True)
class SingularArc:
    """Interval on which the switching function vanishes (not an error)."""

    t_start: float
    t_end: float
    n_cells: int


@dataclass
class ControlSynthesis:
    """Output of :func:`synthesize_control`."""

    u: SampledFunction
    phi: Optional[np.ndarray]
    singular_mask: np.ndarray
    singular_arcs: list

    @property
    def singular(self) -> bool:
        return bool(self.singular_arcs)


# ----------------------------------------------------------------------
def _resolve_mode(prob: OcpProblem, mode: str) -> str:
    if mode not in SYNTHESIS_MODES:
        raise ValueError(f"unknown synthesis mode {mode!r}")
    if mode != "auto":
        if mode != "grid-search" and prob.affine is None:
            raise ValueError(f"mode {mode!r} needs an affine problem")
        return mode
    if prob.affine is None or prob.control_set.kind not in ("ball", "box"):
        return "grid-search"
    if prob.affine.ru > 0 or prob.affine.rv > 0:
        return "quadratic-regularized"
    return "affine-ball" if prob.control_set.kind == "ball" else "affine-box"


def switching_function(prob: OcpProblem, tau: DelayVector, x, p, p0: float, t_f: float,
                       times: np.ndarray):
    """``Phi`` and ``R`` at ``times`` for affine problems.

    ``x`` and ``p`` are :class:`Trajectories` (batch ``B``) or single sampled
    functions.  Returns ``Phi`` of shape ``(B, K, m)`` and ``R`` of shape
    ``(B, K)`` (leading axis dropped for single functions).
    """
    single = isinstance(x, SampledFunction)
    if single:
        x = _as_batch(x)
        p = _as_batch(p)
    aff = prob.affine
    t = np.asarray(times, dtype=float)
    B = x.batch
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), (B,))

    def pieces(tt, with_u):
        X = x.at(tt)
        Y = x.at(tt - tau.tau1) if tau.tau1 > 0 else X
        P = p.at(np.minimum(tt, t_f))
        T = np.broadcast_to(tt, X.shape[:-1])
        args = (T, T - tau.tau0, X, Y)
        if with_u:
            M, c = aff.f1(*args), aff.cost_u(*args)
        else:
            M, c = aff.f2(*args), aff.cost_v(*args)
        return np.einsum("bkim,bki->bkm", M, P) + p0[:, None, None] * c

    phi = pieces(t, True)
    gate = t + tau.tau2 <= t_f + time_eps(t_f)
    if tau.tau2 > 0:
        if np.any(gate):
            phi[:, gate] += pieces(t[gate] + tau.tau2, False)
    else:
        phi += pieces(t, False)
    R = -p0[:, None] * (aff.ru + aff.rv * gate[None, :])
    if single:
        return phi[0], R[0]
    return phi, R


def _as_batch(f: SampledFunction) -> Trajectories:
    if f.interp == "cubic":
        return Trajectories.stack([f])
    return Trajectories(f.grid, f.values[None], f.interp, history=f.history)


def _affine_control(prob: OcpProblem, mode: str, phi: np.ndarray, R: np.ndarray, tol: np.ndarray):
    """Pointwise maximiser for affine modes; returns ``(u, singular_mask)``."""
    U = prob.control_set
    if mode == "quadratic-regularized":
        if np.any(R <= 0):
            raise ValueError("quadratic-regularized synthesis needs positive quadratic weights and p0 < 0")
        return U.project(phi / (2.0 * R[..., None])), np.zeros(phi.shape[:-1], bool)
    if mode == "affine-ball":
        nrm = np.linalg.norm(phi, axis=-1)
        sing = nrm < tol
        u = U.radius * phi / np.where(sing, 1.0, nrm)[..., None]
        u[sing] = 0.0
        return u, sing
    # affine-box: componentwise bang-bang
    lo, hi = U.lower, U.upper
    small = np.abs(phi) < tol[..., None]
    u = np.where(phi > 0, hi, lo)
    u = np.where(small, 0.5 * (lo + hi), u)
    return u, np.all(small, axis=-1)


def maximality_values(prob: OcpProblem, tau: DelayVector, x, p, p0, u_cur, t_f: float,
                      times: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Value of the maximality functional for each candidate control.

    ``value(w) = H(t, .., w, u(t - tau2)) + 1[t + tau2 <= t_f] H(t + tau2, .., u(t + tau2), w)``
    with the other arguments taken from the current iterate.  ``x``, ``p`` and
    ``u_cur`` are single sampled functions; ``candidates`` has shape
    ``(K, L, m)`` (or ``(L, m)`` shared by all times).  Returns ``(K, L)``.
    """
    t = np.asarray(times, dtype=float)
    K = t.size
    W = np.asarray(candidates, dtype=float)
    if W.ndim == 2:
        W = np.broadcast_to(W, (K,) + W.shape)
    L = W.shape[1]

    def H(tt, X, Y, P, Uu, Vv):
        k = X.shape[0]
        f = prob.f_batch(np.repeat(tt, L), np.repeat(tt - tau.tau0, L),
                         np.repeat(X, L, 0), np.repeat(Y, L, 0), Uu.reshape(k * L, -1), Vv.reshape(k * L, -1))
        f0 = prob.f0_batch(np.repeat(tt, L), np.repeat(tt - tau.tau0, L),
                           np.repeat(X, L, 0), np.repeat(Y, L, 0), Uu.reshape(k * L, -1), Vv.reshape(k * L, -1))
        return (np.einsum("ki,ki->k", np.repeat(P, L, 0), f) + p0 * f0).reshape(k, L)

    X = x.sample(t)
    Y = x.sample(t - tau.tau1, "right") if tau.tau1 > 0 else X
    P = p.sample(np.minimum(t, t_f))
    if tau.tau2 > 0:
        V = u_cur.sample(t - tau.tau2)
        val = H(t, X, Y, P, W, np.broadcast_to(V[:, None, :], W.shape))
        gate = t + tau.tau2 <= t_f + time_eps(t_f)
        if np.any(gate):
            ta = t[gate] + tau.tau2
            Xa = x.sample(ta)
            Ya = x.sample(ta - tau.tau1) if tau.tau1 > 0 else Xa
            Pa = p.sample(np.minimum(ta, t_f))
            Ua = u_cur.sample(np.minimum(ta, t_f), "left")
            val[gate] += H(ta, Xa, Ya, Pa, np.broadcast_to(Ua[:, None, :], W[gate].shape), W[gate])
    else:
        val = H(t, X, Y, P, W, W)
    return val


def synthesize_control(prob: OcpProblem, tau: DelayVector, x: SampledFunction, p: SampledFunction,
                       p0: float, t_f: float, mode: str = "auto", grid: TimeGrid | None = None,
                       u_prev: SampledFunction | None = None, tol_singular: float = TOL_SINGULAR,
                       lattice_size: int = 21, interp: str = "linear") -> ControlSynthesis:
    """Control maximising the Hamiltonian pointwise on ``grid``.

    Parameters
    ----------
    mode : {"auto", "affine-ball", "affine-box", "quadratic-regularized", "grid-search"}
        ``auto`` picks the closed form matching the problem structure.
    grid : TimeGrid, optional
        Synthesis grid over ``[0, t_f]``; defaults to the state grid refined
        twice so that Runge-Kutta midpoints are nodes.
    u_prev : SampledFunction, optional
        Current control iterate, needed by ``grid-search`` for the arguments
        that are not being optimised.
    tol_singular : float
        Relative threshold (times ``sup |p|``) below which ``Phi`` counts as zero.

    Notes
    -----
    Runs of more than five consecutive cells with vanishing ``Phi`` are
    reported as :class:`SingularArc` entries; the control there is the centre
    of ``U``.
    """
    mode = _resolve_mode(prob, mode)
    if grid is None:
        grid = TimeGrid(0.0, t_f, 2 * x.grid.n_steps)
    t = grid.nodes
    pscale = float(np.max(np.abs(p.values)))
    phi = None
    if mode == "grid-search":
        lat = prob.control_set.lattice(lattice_size)
        cur = u_prev if u_prev is not None else SampledFunction(
            grid, np.tile(prob.control_set.center(), (t.size, 1)), "linear", history=prob.history_control)
        vals = maximality_values(prob, tau, x, p, p0, cur, t_f, t, lat)
        u_vals = lat[np.argmax(vals, axis=1)]
        sing = (vals.max(axis=1) - vals.min(axis=1)) < tol_singular * max(pscale, abs(p0), 1e-300)
    else:
        phi, R = switching_function(prob, tau, x, p, p0, t_f, t)
        tol = np.full(t.shape, tol_singular * pscale)
        u_vals, sing = _affine_control(prob, mode, phi, R, tol)
    u = SampledFunction(grid, u_vals, interp, history=prob.history_control)
    return ControlSynthesis(u, phi, sing, singular_arcs(grid, sing))


def singular_arcs(grid: TimeGrid, mask: np.ndarray, min_cells: int = 5) -> list:
    """Maximal runs of flagged nodes spanning more than ``min_cells`` cells."""
    arcs = []
    t = grid.nodes
    k = 0
    n = mask.size
    while k < n:
        if mask[k]:
            j = k
            while j + 1 < n and mask[j + 1]:
                j += 1
            if j - k > min_cells:
                arcs.append(SingularArc(float(t[k]), float(t[j]), int(j - k)))
            k = j + 1
        else:
            k += 1
    return arcs


def maximality_defect(prob: OcpProblem, tau: DelayVector, ext: Extremal, lattice_size: int = 21,
                      times: np.ndarray | None = None) -> float:
    """``max_t max_w [value(w) - value(u(t))]`` over a lattice of ``U``.

    Nonpositive values certify the maximality condition on the lattice.
    """
    t = ext.u.grid.nodes if times is None else np.asarray(times, dtype=float)
    lat = prob.control_set.lattice(lattice_size)
    cand = np.concatenate([np.broadcast_to(lat, (t.size,) + lat.shape),
                           ext.u.sample(t)[:, None, :]], axis=1)
    vals = maximality_values(prob, tau, ext.x, ext.p, ext.p0, ext.u, ext.t_f, t, cand)
    return float(np.max(vals[:, :-1] - vals[:, -1:]))


def transversality_coordinates(p_final, target: Target) -> np.ndarray:
    """Components of ``p(t_f)`` along an orthonormal basis of the target tangent space."""
    return target.tangent_basis().T @ np.asarray(p_final, dtype=float)


def transversality_residual(ext: Extremal, target: Target) -> np.ndarray:
    """Projection of ``p(t_f)`` onto the tangent space ``ker A`` (zero for points)."""
    basis = target.tangent_basis()
    pf = ext.p.eval(ext.t_f, "left")
    return basis @ (basis.T @ pf)


def free_time_residual(prob: OcpProblem, tau: DelayVector, ext: Extremal) -> float:
    """Hamiltonian at the final time; zero for free-time extremals."""
    if not prob.free_time:
        raise ValueError("free_time_residual needs a free-final-time problem")
    tf = ext.t_f
    x = ext.x.eval(tf, "left")
    y = ext.x.eval(tf - tau.tau1, "left")
    u = ext.u.eval(tf, "left")
    v = ext.u.eval(tf - tau.tau2, "left")
    from .ocp_model import hamiltonian
    return hamiltonian(prob, tf, tf - tau.tau0, x, y, ext.p.eval(tf, "left"), ext.p0, u, v)


def adjoint_defect(prob: OcpProblem, tau: DelayVector, ext: Extremal,
                   cfg: IntegratorConfig | None = None) -> float:
    """Sup distance between ``p`` and the adjoint re-integrated from ``p(t_f)``.

    The re-integration uses the stored ``x`` and ``u`` on the extremal's
    state grid, so the defect measures how well ``p`` solves the adjoint
    equation along the stored trajectory.
    """
    grid = ext.p.grid
    cfg = cfg or IntegratorConfig(h=grid.h)
    q = integrate_adjoint(prob, tau, ext.x, ext.u, ext.p.eval(ext.t_f, "left"), ext.p0,
                          ext.t_f, cfg, grid=grid)
    return float(np.max(np.abs(q.values - ext.p.values)))


def residual_report(prob: OcpProblem, tau: DelayVector, ext: Extremal, lattice_size: int = 21,
                    cfg: IntegratorConfig | None = None) -> ResidualReport:
    """All five defects for ``ext``."""
    xf = ext.x.eval(ext.t_f, "left")
    trans = transversality_residual(ext, prob.target)
    return ResidualReport(
        adjoint_defect=adjoint_defect(prob, tau, ext, cfg),
        maximality_defect=max(0.0, maximality_defect(prob, tau, ext, lattice_size)),
        transversality_defect=float(np.max(np.abs(trans))) if trans.size else 0.0,
        free_time_defect=abs(free_time_residual(prob, tau, ext)) if prob.free_time else 0.0,
        boundary_defect=prob.target.distance(xf),
    )
