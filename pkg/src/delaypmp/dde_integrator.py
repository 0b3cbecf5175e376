"""Fixed-step method-of-steps integration of the delayed state and adjoint.

The state is integrated forward from the history, the adjoint backward from
its terminal value.  Both use the same uniform mesh; delayed (forward) and
advanced (backward) arguments are read from the part of the current
trajectory that is already computed, through cubic Hermite dense output.
This needs every positive sampled delay to span at least four steps
(``h <= tau / 4``), which :class:`IntegratorConfig` enforces.

Internally trajectories are handled in batches (:class:`Trajectories`) so that
several shooting unknowns can be propagated in one pass; the public
functions wrap single :class:`~delaypmp.time_mesh.SampledFunction` objects.

Stage conventions: a step over ``[t_k, t_k+1]`` samples controls at ``t_k``
from the right, at the midpoint, and at ``t_k+1`` from the left, so a step
never sees the control of a neighbouring cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ocp_model import OcpProblem
from .time_mesh import DelayVector, OutOfDomain, SampledFunction, TimeGrid, time_eps

__all__ = [
    "NonFiniteState",
    "IntegratorConfig",
    "Trajectories",
    "stage_times",
    "forward_batch",
    "backward_batch",
    "integrate_state",
    "integrate_cost",
    "integrate_adjoint",
]

STAGE_C = (0.0, 0.5, 1.0)
STAGE_SIDE = ("right", "right", "left")


class NonFiniteState(ArithmeticError):
    """A trajectory became non-finite or left the configured state bound."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size and scheme for state/adjoint integration.

    Parameters
    ----------
    h : float
        Largest step used.  Grids are refined further when a delay needs it.
    scheme : {"rk4", "heun"}
    dense_output : bool
        Store cubic Hermite dense output (otherwise linear interpolation).
    """

    h: float = 1e-3
    scheme: str = "rk4"
    dense_output: bool = True

    def __post_init__(self) -> None:
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"step must be positive, got {self.h}")
        if self.scheme not in ("rk4", "heun"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def max_step(self, tau: DelayVector | None) -> float:
        lag = None if tau is None else tau.min_positive_lag()
        return self.h if lag is None else min(self.h, lag / 4.0)

    def grid(self, t_f: float, tau: DelayVector | None = None, n_steps: int | None = None) -> TimeGrid:
        """Uniform grid on ``[0, t_f]`` respecting the resolution guard."""
        if not t_f > 0:
            raise ValueError(f"final time must be positive, got {t_f}")
        n = int(math.ceil(t_f / self.max_step(tau) - 1e-9))
        if n_steps is not None:
            n = max(n, int(n_steps))
        return TimeGrid(0.0, t_f, max(n, 1))

    def check_grid(self, grid: TimeGrid, tau: DelayVector) -> None:
        lag = tau.min_positive_lag()
        if lag is not None and grid.h > lag / 4.0 * (1 + 1e-9):
            raise ValueError(f"resolution guard: step {grid.h:.3g} exceeds delay/4 = {lag / 4:.3g}")


def stage_times(grid: TimeGrid) -> np.ndarray:
    """Sample times ``(N, 3)`` of every cell: start, midpoint, end."""
    t = grid.nodes
    mid = 0.5 * (t[:-1] + t[1:])
    return np.stack([t[:-1], mid, t[1:]], axis=1)


class Trajectories:
    """Batch of ``B`` trajectories sharing one grid.

    ``values`` has shape ``(B, N + 1, d)``.  Cubic batches carry one-sided cell
    derivatives ``d0, d1`` of shape ``(B, N, d)``.  The optional ``history`` is
    shared by all members and answers queries left of the grid.
    """

    def __init__(self, grid: TimeGrid, values, interp: str = "linear", d0=None, d1=None,
                 history: SampledFunction | None = None) -> None:
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.interp = interp
        self.d0 = d0
        self.d1 = d1
        self.history = history
        if interp == "cubic" and (d0 is None or d1 is None):
            raise ValueError("cubic batches need cell derivatives")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_functions(cls, funcs, grid: TimeGrid) -> "Trajectories":
        """Resample single functions on ``grid`` (linear unless all are constant)."""
        interp = "constant" if all(f.interp == "constant" for f in funcs) else "linear"
        vals = np.stack([f.sample(grid.nodes, "right" if interp == "constant" else "right") for f in funcs])
        return cls(grid, vals, interp, history=funcs[0].history)

    def locate(self, times: np.ndarray, side: str):
        """Cell index, local coordinate and history mask for ``times``."""
        g = self.grid
        eps = time_eps(g.t_end - g.t_start)
        t = np.asarray(times, dtype=float)
        if side == "left" and self.history is not None:
            hist = t <= g.t_start + eps
        else:
            hist = t < g.t_start - eps
        if np.any(hist) and self.history is None:
            raise OutOfDomain(f"t={t[hist].min()!r} is left of [{g.t_start}, {g.t_end}]")
        if np.any(t[~hist] > g.t_end + eps):
            raise OutOfDomain(f"t={t[~hist].max()!r} is right of [{g.t_start}, {g.t_end}]")
        x = (t - g.t_start) / g.h
        i = np.floor(x).astype(np.int64)
        theta = x - i
        lo = theta < 1e-9
        hi = theta > 1.0 - 1e-9
        theta = np.where(lo | hi, 0.0, theta)
        i = np.where(hi, i + 1, i)
        if side == "left":
            back = (theta == 0.0) & (i > 0)
            i = np.where(back, i - 1, i)
            theta = np.where(back, 1.0, theta)
        over = i >= g.n_steps
        i = np.where(over, g.n_steps - 1, i)
        theta = np.where(over, 1.0, theta)
        under = i < 0
        i = np.where(under, 0, i)
        theta = np.where(under, 0.0, theta)
        return i, theta, hist

    def at(self, times, side: str = "right") -> np.ndarray:
        """Values at ``times`` (any shape ``S``); returns ``(B,) + S + (d,)``."""
        t = np.asarray(times, dtype=float)
        shape = t.shape
        t = t.reshape(-1)
        i, theta, hist = self.locate(t, side)
        v = self.values
        th = theta[None, :, None]
        if self.interp == "constant":
            nxt = (theta == 1.0) & (side != "left")
            out = np.where(nxt[None, :, None], v[:, np.minimum(i + 1, self.grid.n_steps)], v[:, i])
        elif self.interp == "linear":
            out = (1.0 - th) * v[:, i] + th * v[:, i + 1]
        else:
            h = self.grid.h
            t2 = th * th
            t3 = t2 * th
            out = ((2 * t3 - 3 * t2 + 1) * v[:, i] + (t3 - 2 * t2 + th) * h * self.d0[:, i]
                   + (3 * t2 - 2 * t3) * v[:, i + 1] + (t3 - t2) * h * self.d1[:, i])
        if np.any(hist):
            hv = self.history.sample(np.minimum(t[hist], self.history.t_end), side)
            out[:, hist] = hv[None]
        return out.reshape((v.shape[0],) + shape + (v.shape[2],))

    def at_stages(self, grid: TimeGrid, lag: float = 0.0) -> np.ndarray:
        """Samples at the stage times of ``grid`` shifted by ``-lag``: ``(B, N, 3, d)``."""
        T = stage_times(grid) - lag
        cols = [self.at(T[:, c], STAGE_SIDE[c]) for c in range(3)]
        return np.stack(cols, axis=2)

    def member(self, b: int, history: SampledFunction | None = None) -> SampledFunction:
        derivs = None if self.interp != "cubic" else (self.d0[b], self.d1[b])
        hist = self.history if history is None else history
        return SampledFunction(self.grid, self.values[b], self.interp, derivs, hist)

    @classmethod
    def stack(cls, funcs) -> "Trajectories":
        """Batch of functions already sharing a grid and interpolation."""
        f0 = funcs[0]
        vals = np.stack([f.values for f in funcs])
        d0 = d1 = None
        if f0.interp == "cubic":
            d0 = np.stack([f.derivatives[0] for f in funcs])
            d1 = np.stack([f.derivatives[1] for f in funcs])
        return cls(f0.grid, vals, f0.interp, d0, d1, f0.history)


def _field(prob: OcpProblem):
    """Dynamics over a batch with scalar or per-member time arguments."""
    if prob.vectorized:
        def F(t, s, x, y, u, v):
            return np.asarray(prob.dynamics(t, s, x, y, u, v), dtype=float)
    else:
        def F(t, s, x, y, u, v):
            return prob.f_batch(t, s, x, y, u, v)
    return F


class _Lookup:
    """Precomputed Hermite weights for reading a trajectory at ``times - lag``.

    Used inside the stepping loops, where the trajectory is still being
    written; the caller guarantees that the cells read are complete.
    """

    def __init__(self, grid: TimeGrid, times: np.ndarray, side: str, history: SampledFunction | None,
                 batch: int, lo_ok: bool = True) -> None:
        eps = time_eps(grid.t_end - grid.t_start)
        t = np.asarray(times, dtype=float)
        self.hist = t < grid.t_start - eps if lo_ok else np.zeros(t.shape, bool)
        if side == "left" and history is not None:
            self.hist |= t <= grid.t_start + eps
        tb = np.clip(t, grid.t_start, grid.t_end)
        x = (tb - grid.t_start) / grid.h
        i = np.floor(x).astype(np.int64)
        th = x - i
        snap_hi = th > 1 - 1e-9
        i = np.where(snap_hi, i + 1, i)
        th = np.where(snap_hi | (th < 1e-9), 0.0, th)
        top = i >= grid.n_steps
        i = np.where(top, grid.n_steps - 1, i)
        th = np.where(top, 1.0, th)
        self.i = i
        t2, t3 = th * th, th * th * th
        h = grid.h
        self.w = np.stack([2 * t3 - 3 * t2 + 1, h * (t3 - 2 * t2 + th), 3 * t2 - 2 * t3, h * (t3 - t2)], axis=-1)
        self.hval = None
        if np.any(self.hist):
            hv = history.sample(t[self.hist], side)
            full = np.zeros(t.shape + (history.dim,))
            full[self.hist] = hv
            self.hval = full

    def read(self, idx, X, D0, D1):
        """Value at entry ``idx`` of the precomputed times for arrays ``(B, ., ...)``."""
        if self.hist[idx]:
            return np.broadcast_to(self.hval[idx], (X.shape[0],) + self.hval[idx].shape)
        i = self.i[idx]
        w = self.w[idx]
        return w[0] * X[:, i] + w[1] * D0[:, i] + w[2] * X[:, i + 1] + w[3] * D1[:, i]


def forward_batch(prob: OcpProblem, tau: DelayVector, grid: TimeGrid, u: Trajectories,
                  scheme: str = "rk4", bound: float | None = None,
                  x_start: np.ndarray | None = None) -> Trajectories:
    """Integrate the delayed state equation for a batch of controls.

    Returns cubic :class:`Trajectories` with the state history attached.
    """
    n = prob.state_dim
    N, h = grid.n_steps, grid.h
    B = u.batch
    F = _field(prob)
    T = stage_times(grid)
    U = u.at_stages(grid, 0.0)
    V = u.at_stages(grid, tau.tau2) if tau.tau2 > 0 else U
    S = T - tau.tau0
    phi1 = prob.history_state
    lag = tau.tau1
    look = None
    if lag > 0:
        look = [_Lookup(grid, T[:, c] - lag, STAGE_SIDE[c], phi1, B) for c in range(3)]
    X = np.empty((B, N + 1, n))
    D0 = np.empty((B, N, n))
    D1 = np.empty((B, N, n))
    X[:, 0] = phi1.eval(0.0) if x_start is None else x_start
    jump = np.zeros(N, bool)
    if N > 1:
        jump[:-1] = (np.any(U[:, :-1, 2] != U[:, 1:, 0], axis=(0, 2))
                     | np.any(V[:, :-1, 2] != V[:, 1:, 0], axis=(0, 2)))
    rk4 = scheme == "rk4"
    bound = np.inf if bound is None else bound

    def Y(k, c, xs):
        if look is None:
            return xs
        return look[c].read(k, X, D0, D1)

    for k in range(N):
        x = X[:, k]
        t0, tm, t1 = T[k]
        k1 = F(t0, S[k, 0], x, Y(k, 0, x), U[:, k, 0], V[:, k, 0])
        if k > 0:
            if jump[k - 1]:
                xe = X[:, k]
                D1[:, k - 1] = F(t0, S[k - 1, 2], xe, Y(k - 1, 2, xe), U[:, k - 1, 2], V[:, k - 1, 2])
            else:
                D1[:, k - 1] = k1
        D0[:, k] = k1
        if rk4:
            xa = x + 0.5 * h * k1
            k2 = F(tm, S[k, 1], xa, Y(k, 1, xa), U[:, k, 1], V[:, k, 1])
            xb = x + 0.5 * h * k2
            k3 = F(tm, S[k, 1], xb, Y(k, 1, xb), U[:, k, 1], V[:, k, 1])
            xc = x + h * k3
            k4 = F(t1, S[k, 2], xc, Y(k, 2, xc), U[:, k, 2], V[:, k, 2])
            xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            xc = x + h * k1
            k2 = F(t1, S[k, 2], xc, Y(k, 2, xc), U[:, k, 2], V[:, k, 2])
            xn = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(xn)):
            raise NonFiniteState(f"state became non-finite at t={t1:.6g}")
        if np.max(np.abs(xn)) > bound:
            raise NonFiniteState(f"state left the bound {bound:g} at t={t1:.6g}")
        X[:, k + 1] = xn
    xe = X[:, N]
    D1[:, N - 1] = F(T[-1, 2], S[-1, 2], xe, Y(N - 1, 2, xe), U[:, N - 1, 2], V[:, N - 1, 2])
    return Trajectories(grid, X, "cubic", D0, D1, phi1)


def _stage_points(prob, tau, grid, x: Trajectories, u: Trajectories, shift: float = 0.0,
                  clip: float | None = None):
    """Arguments of ``f`` at the (shifted) stage times: each ``(B, N, 3, .)``."""
    T = stage_times(grid) + shift
    if clip is not None:
        T = np.minimum(T, clip)
    B = x.batch
    X = np.stack([x.at(T[:, c], STAGE_SIDE[c]) for c in range(3)], axis=2)
    if tau.tau1 > 0:
        Y = np.stack([x.at(T[:, c] - tau.tau1, STAGE_SIDE[c]) for c in range(3)], axis=2)
    else:
        Y = X
    U = np.stack([u.at(T[:, c], STAGE_SIDE[c]) for c in range(3)], axis=2)
    if tau.tau2 > 0:
        V = np.stack([u.at(T[:, c] - tau.tau2, STAGE_SIDE[c]) for c in range(3)], axis=2)
    else:
        V = U
    tt = np.broadcast_to(T, (B,) + T.shape)
    return tt, tt - tau.tau0, X, Y, U, V


def _flat_jac(prob, pts, which: str, mask=None):
    """Jacobians at stage points (optionally only where ``mask``)."""
    t, s, X, Y, U, V = pts
    lead = X.shape[:-1]
    if mask is not None:
        sel = np.broadcast_to(mask, lead)
        args = [a[sel] for a in (t, s, X, Y, U, V)]
    else:
        args = [a.reshape((-1,) + a.shape[len(lead):]) for a in (t, s, X, Y, U, V)]
    jac = prob.jacobians_batch(*args, which=which)
    out = {}
    for key, J in jac.items():
        if mask is None:
            out[key] = J.reshape(lead + J.shape[1:])
        else:
            full = np.zeros(lead + J.shape[1:])
            full[sel] = J
            out[key] = full
    return out


def backward_batch(prob: OcpProblem, tau: DelayVector, grid: TimeGrid, x: Trajectories,
                   u: Trajectories, p_terminal: np.ndarray, p0w: np.ndarray,
                   scheme: str = "rk4"):
    """Integrate the adjoint backward for several terminal columns at once.

    Parameters
    ----------
    p_terminal : ndarray, shape (B, n, C)
        Terminal values, one column per independent solution.
    p0w : ndarray, shape (C,)
        Cost multiplier used by each column.  The equation is linear in
        ``(p, p0)``, so columns may be superposed afterwards.

    Returns
    -------
    P, D0, D1 : ndarrays
        Node values ``(B, N + 1, n, C)`` and one-sided cell derivatives
        ``(B, N, n, C)``.
    """
    n = prob.state_dim
    N, h = grid.n_steps, grid.h
    t_f = grid.t_end
    B = x.batch
    C = p_terminal.shape[2]
    p0w = np.asarray(p0w, dtype=float)
    pts = _stage_points(prob, tau, grid, x, u)
    lag = tau.tau1
    if lag > 0:
        jx = _flat_jac(prob, pts, "x")["x"]
        T = stage_times(grid)
        # one-sided indicator: right limits at cell starts, left limits at cell ends
        gate = T + lag <= t_f + time_eps(t_f)
        gate[:, 0] = T[:, 0] + lag < t_f - time_eps(t_f)
        if np.any(gate):
            adv = _stage_points(prob, tau, grid, x, u, shift=lag, clip=t_f)
            jy = _flat_jac(prob, adv, "y", mask=gate[None])["y"]
        else:
            jy = np.zeros_like(jx)
        look = [_Lookup(grid, np.minimum(T[:, c] + lag, t_f), STAGE_SIDE[c], None, B, lo_ok=False)
                for c in range(3)]
    else:
        jac = _flat_jac(prob, pts, "xy")
        jx = jac["x"] + jac["y"]
        jy = None
        gate = None
        look = None
    AT = np.swapaxes(jx[..., :n, :], -1, -2)          # (B, N, 3, n, n)
    q = jx[..., n, :]
    if jy is not None:
        AyT = np.swapaxes(jy[..., :n, :], -1, -2)
        q = q + jy[..., n, :]
    Q = -q[..., None] * p0w                             # (B, N, 3, n, C)

    P = np.empty((B, N + 1, n, C))
    D0 = np.empty((B, N, n, C))
    D1 = np.empty((B, N, n, C))
    P[:, N] = p_terminal

    def R(k, c, Pst):
        out = Q[:, k, c] - AT[:, k, c] @ Pst
        if look is not None and gate[k, c]:
            out -= AyT[:, k, c] @ look[c].read(k, P, D0, D1)
        return out

    rk4 = scheme == "rk4"
    for k in range(N - 1, -1, -1):
        p = P[:, k + 1]
        l1 = R(k, 2, p)
        D1[:, k] = l1
        if rk4:
            l2 = R(k, 1, p - 0.5 * h * l1)
            l3 = R(k, 1, p - 0.5 * h * l2)
            l4 = R(k, 0, p - h * l3)
            pn = p - (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        else:
            l2 = R(k, 0, p - h * l1)
            pn = p - 0.5 * h * (l1 + l2)
        if not np.all(np.isfinite(pn)):
            raise NonFiniteState(f"adjoint became non-finite at t={grid.nodes[k]:.6g}")
        P[:, k] = pn
        D0[:, k] = R(k, 0, pn)
    return P, D0, D1


# ----------------------------------------------------------------------
# Single-trajectory wrappers
# ----------------------------------------------------------------------
def _control_batch(u: SampledFunction, prob: OcpProblem) -> Trajectories:
    hist = u.history if u.history is not None else prob.history_control
    derivs = u.derivatives
    d0 = d1 = None
    if derivs is not None:
        d0, d1 = derivs[0][None], derivs[1][None]
    return Trajectories(u.grid, u.values[None], u.interp, d0, d1, hist)


def _resolve_grid(cfg: IntegratorConfig, t_f: float, tau: DelayVector, grid: TimeGrid | None) -> TimeGrid:
    if grid is None:
        grid = cfg.grid(t_f, tau)
    elif abs(grid.t_end - t_f) > time_eps(t_f) or grid.t_start != 0.0:
        raise ValueError("grid must span [0, t_f]")
    cfg.check_grid(grid, tau)
    return grid


def integrate_state(prob: OcpProblem, tau: DelayVector, u: SampledFunction, t_f: float,
                    cfg: IntegratorConfig | None = None, grid: TimeGrid | None = None,
                    bound: float | None = None) -> SampledFunction:
    """State trajectory on ``[-delta, t_f]`` driven by ``u``.

    The returned function lives on a grid over ``[0, t_f]`` and carries the
    state history, so it answers queries on the whole interval.

    Raises
    ------
    NonFiniteState
        If the state blows up (or leaves ``bound``).
    OutOfDomain
        If ``u`` does not cover the times the scheme samples.
    """
    cfg = cfg or IntegratorConfig()
    grid = _resolve_grid(cfg, t_f, tau, grid)
    traj = forward_batch(prob, tau, grid, _control_batch(u, prob), cfg.scheme, bound)
    x = traj.member(0)
    if not cfg.dense_output:
        x = SampledFunction(grid, x.values, "linear", history=prob.history_state)
    return x


def integrate_cost(prob: OcpProblem, tau: DelayVector, x: SampledFunction, u: SampledFunction,
                   t_f: float, cfg: IntegratorConfig | None = None,
                   grid: TimeGrid | None = None) -> float:
    """Running cost by composite Simpson (rk4) or trapezoid (heun) quadrature."""
    cfg = cfg or IntegratorConfig()
    if grid is None:
        grid = x.grid if (x.grid.t_start == 0.0 and abs(x.grid.t_end - t_f) <= time_eps(t_f)) \
            else cfg.grid(t_f, tau)
    xb = Trajectories.stack([x]) if x.interp == "cubic" else Trajectories(
        x.grid, x.values[None], x.interp, history=x.history)
    pts = _stage_points(prob, tau, grid, xb, _control_batch(u, prob))
    flat = [a.reshape((-1,) + a.shape[3:]) for a in pts]
    f0 = prob.f0_batch(*flat).reshape(grid.n_steps, 3)
    if cfg.scheme == "rk4":
        return float(grid.h / 6.0 * np.sum(f0[:, 0] + 4.0 * f0[:, 1] + f0[:, 2]))
    return float(grid.h / 2.0 * np.sum(f0[:, 0] + f0[:, 2]))


def integrate_adjoint(prob: OcpProblem, tau: DelayVector, x: SampledFunction, u: SampledFunction,
                      p_terminal, p0: float, t_f: float, cfg: IntegratorConfig | None = None,
                      grid: TimeGrid | None = None) -> SampledFunction:
    """Adjoint on ``[0, t_f]`` from ``p(t_f) = p_terminal`` and constant ``p0``.

    The advanced term ``dH/dy`` at ``t + tau1`` is switched off exactly for
    ``t > t_f - tau1``.
    """
    cfg = cfg or IntegratorConfig()
    grid = _resolve_grid(cfg, t_f, tau, grid)
    xb = Trajectories.stack([x]) if x.interp == "cubic" else Trajectories(
        x.grid, x.values[None], x.interp, history=x.history)
    pT = np.asarray(p_terminal, dtype=float).reshape(1, prob.state_dim, 1)
    P, D0, D1 = backward_batch(prob, tau, grid, xb, _control_batch(u, prob), pT,
                               np.array([float(p0)]), cfg.scheme)
    if cfg.dense_output:
        return SampledFunction(grid, P[0, :, :, 0], "cubic", (D0[0, :, :, 0], D1[0, :, :, 0]))
    return SampledFunction(grid, P[0, :, :, 0], "linear")
